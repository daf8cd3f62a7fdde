"""End-to-end acceptance runs on the desk-scale synthetic task.

One test per criterion; each prints a single ``AC-n PASS|FAIL`` line with the
measured numbers. The pretrained model and the first forgetting run are shared
through module-scoped fixtures, so the whole file takes a few minutes.
"""

import math
import time

import numpy as np
import pytest

from gslora import autodiff as ad
from gslora import engine, io, lora as lora_mod, metrics, objective as obj_mod
from gslora.data import SyntheticDatasetConfig, generate_dataset
from gslora.engine import ForgettingTask, LoraConfig
from gslora.metrics import accuracy, h_mean
from gslora.model import ModelConfig, forward, from_named_arrays, init_model, pretrain
from gslora.objective import ObjectiveConfig, default_bnd
from gslora.optim import OptimizerConfig
from gslora.rng import stream

SEED = 0
MODEL = ModelConfig()  # 4 blocks, dim 256, 4 heads, ffn 128, C=10
DATA = SyntheticDatasetConfig(seed=SEED)
PRETRAIN_OPT = OptimizerConfig(lr=1e-3, batch_size=32)
PRETRAIN_EPOCHS = 25
OBJ = ObjectiveConfig(bnd=default_bnd(MODEL.num_classes))  # alpha_k 20, warm-up 20 epochs
FORGET = (0, 1)
SCHEDULE = [(0, 1), (2, 3), (4, 5)]
PROBE_EPOCHS = 20
PROBE_OPT = OptimizerConfig(lr=1e-2, batch_size=32)
L2_LAMBDA = 0.0035  # largest lambda on the tuning grid whose run reaches Acc_f <= 5


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")


def task(index, classes, **kw):
    return ForgettingTask(index=index, forget_classes=classes, **kw)


def retained(excluded):
    return [c for c in range(MODEL.num_classes) if c not in set(excluded)]


@pytest.fixture(scope="module")
def base():
    splits = generate_dataset(DATA)
    t = time.perf_counter()
    model = pretrain(MODEL, splits.train, PRETRAIN_OPT, PRETRAIN_EPOCHS, SEED)
    return {"model": model, "splits": splits, "seconds": time.perf_counter() - t,
            "test_acc": accuracy(model, splits.test), "fingerprint": model.fingerprint()}


def fresh(base, rank=8, grouping="block"):
    return engine.init_state(base["model"].copy(), base["splits"], LoraConfig(rank, grouping), SEED)


@pytest.fixture(scope="module")
def first_task(base):
    state = fresh(base)
    t = time.perf_counter()
    out = engine.run_task(state, task(1, FORGET), OBJ)
    return out, time.perf_counter() - t


def pre_acc(base, classes):
    return accuracy(base["model"], base["splits"].test, classes)


# ---------------------------------------------------------------------------


def test_ac1_gradient_oracle(capsys):
    # small enough that central differences over every entry of every tensor fit the time budget
    cfg = ModelConfig(num_blocks=2, model_dim=4, num_heads=2, ffn_hidden_dim=4, seq_len=2, input_dim=3,
                      num_classes=3, dropout=0.0)
    obj = ObjectiveConfig(bnd=5.0, alpha_k=0.3, warmup_epochs=0, prox_mode="subgradient")
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = init_model(cfg, seed)
        lora = lora_mod.attach(model, 1, "block", seed)
        for pair in lora.pairs.values():
            pair.B.data[...] = rng.standard_normal(pair.B.shape) * 0.1
        x = rng.standard_normal((6, cfg.seq_len, cfg.input_dim))
        y = rng.integers(0, cfg.num_classes, 6)

        def loss(_):
            logits = forward(model, x, lora)
            retain = obj_mod.retain_loss(ad.rows(logits, 0, 4), y[:4])
            fl = obj_mod.forget_loss(ad.rows(logits, 4, 6), y[4:], obj.bnd)
            return obj_mod.total_loss(obj_mod.data_loss(retain, fl, obj.beta), obj_mod.structure_loss(lora), obj.alpha_k)

        tensors = list(model.named_parameters().values()) + lora.parameters()
        for t in tensors:
            was = t.requires_grad
            worst = max(worst, ad.grad_check(loss, t, 1e-5))
            t.requires_grad = was
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 30
    report(capsys, "AC-1", ok, f"max rel err {worst:.2e} over 20 seeds x {len(tensors)} tensors, {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30


def test_ac2_single_task_forgetting(base, first_task, capsys):
    state, seconds = first_task
    rec = state.records[0]
    pre_r = pre_acc(base, retained(FORGET))
    ok = (base["test_acc"] >= 95 and rec.acc_f <= 5 and rec.acc_r >= pre_r - 5
          and state.model.fingerprint() == base["fingerprint"])
    report(capsys, "AC-2", ok, f"pretrain test {base['test_acc']:.1f} ({base['seconds']:.0f}s); "
                               f"Acc_f {rec.acc_f:.1f} Acc_r {rec.acc_r:.1f} (pretrain {pre_r:.1f}); "
                               f"hash unchanged {state.model.fingerprint() == base['fingerprint']}; {seconds:.0f}s")
    assert base["test_acc"] >= 95
    assert rec.acc_f <= 5
    assert rec.acc_r >= pre_r - 5
    assert state.model.fingerprint() == base["fingerprint"]


def test_ac3_continual_schedule(base, first_task, capsys):
    state = first_task[0]
    for i, classes in enumerate(SCHEDULE[1:], start=2):
        state = engine.run_task(state, task(i, classes), OBJ)
    pre_r = {r.task: pre_acc(base, retained(c for t in SCHEDULE[:r.task] for c in t)) for r in state.records}
    rows = [(r.task, r.acc_f, r.acc_o, r.acc_r, pre_r[r.task]) for r in state.records]
    ok = all(f <= 5 and (o is None or o <= 5) and r >= p - 8 for _, f, o, r, p in rows)
    ok = ok and len(state.forgotten) == 3 and state.retained_classes() == [6, 7, 8, 9]
    detail = "; ".join(f"t{t} Acc_f {f:.1f} Acc_o {'-' if o is None else f'{o:.1f}'} Acc_r {r:.1f}/{p:.1f}"
                       for t, f, o, r, p in rows)
    report(capsys, "AC-3", ok, detail)
    for _, f, o, r, p in rows:
        assert f <= 5
        assert o is None or o <= 5
        assert r >= p - 8
    assert state.retained_classes() == [6, 7, 8, 9]


def test_ac4_h_mean(capsys):
    h = h_mean(71.1, 73.8 - 2.0)
    props = h_mean(50.0, 50.0) == pytest.approx(50.0) and h_mean(71.1, 0.0) == 0.0
    ok = abs(h - 71.4) <= 0.1 and props
    report(capsys, "AC-4", ok, f"h_mean(71.1, 71.8) = {h:.3f}; identity and zero-drop properties {props}")
    assert h == pytest.approx(71.4, abs=0.1)
    assert props


def test_ac5_baseline_ordering(base, first_task, capsys):
    state = first_task[0]
    splits = base["splits"]
    keep = retained(FORGET)
    t = task(1, FORGET)
    rng = stream(SEED, "sampling", 1000 + t.index)  # same draw as the GS-LoRA run
    replay = engine.build_replay_buffer(splits.train, keep, t.data_ratio, rng=rng)
    forget = engine._per_class_subsample(splits.train, FORGET, t.data_ratio, rng)
    retrain = engine.baseline_retrain(MODEL, replay, t.epochs, t.optimizer, SEED)
    l2 = engine.baseline_l2(base["model"], replay, forget, t.epochs, t.optimizer, L2_LAMBDA, SEED)
    gs = state.records[0].acc_r
    rr, lr_ = accuracy(retrain, splits.test, keep), accuracy(l2, splits.test, keep)
    lf = accuracy(l2, splits.test, FORGET)
    ok = gs - rr >= 10 and gs - lr_ >= 3
    report(capsys, "AC-5", ok, f"Acc_r GS-LoRA {gs:.1f}, retrain {rr:.1f}, L2(lambda={L2_LAMBDA}) {lr_:.1f} "
                               f"(L2 Acc_f {lf:.1f})")
    assert gs - rr >= 10
    assert gs - lr_ >= 3


def test_ac6_sparsity_and_warmup(base, first_task, capsys):
    a = first_task[0].records[0]
    pre_f = pre_acc(base, FORGET)
    no_warm = engine.run_task(fresh(base), task(1, FORGET), ObjectiveConfig(bnd=OBJ.bnd, alpha_k=5 * OBJ.alpha_k,
                                                                             warmup_epochs=0)).records[0]
    plain = engine.baseline_plain_lora(fresh(base), task(1, FORGET), OBJ).records[0]
    ok_a = a.zero_group_ratio >= 0.1 and a.acc_f <= 5
    ok_b = no_warm.acc_f >= 0.5 * pre_f
    ok_c = plain.zero_group_ratio == 0.0
    report(capsys, "AC-6", ok_a and ok_b and ok_c,
           f"(a) zero ratio {a.zero_group_ratio:.2f} Acc_f {a.acc_f:.1f}; "
           f"(b) K=0 alpha {5 * OBJ.alpha_k:g}: Acc_f {no_warm.acc_f:.1f} vs pretrain {pre_f:.1f} "
           f"(zero ratio {no_warm.zero_group_ratio:.2f}); (c) alpha 0 zero ratio {plain.zero_group_ratio:.2f}")
    assert ok_a
    assert ok_b
    assert ok_c


def test_ac7_recovery_probe(base, first_task, capsys):
    state = first_task[0]
    splits = base["splits"]
    pre_f = pre_acc(base, FORGET)
    gs = engine.recovery_probe(state.model, state.lora, splits.train, splits.test, FORGET, PROBE_EPOCHS,
                               PROBE_OPT, SEED)
    control = engine.recovery_probe(engine.head_mask(base["model"], FORGET), None, splits.train, splits.test,
                                    FORGET, PROBE_EPOCHS, PROBE_OPT, SEED)
    c_end, g_end = control.acc_f[-1], gs.acc_f[-1]
    ok = c_end >= 0.8 * pre_f and c_end - g_end >= 30
    report(capsys, "AC-7", ok, f"after {PROBE_EPOCHS} probe epochs Acc_f control {c_end:.1f} "
                               f"(pretrain {pre_f:.1f}), GS-LoRA {g_end:.1f}, gap {c_end - g_end:.1f}; "
                               f"GS-LoRA curve {[round(v) for v in gs.acc_f[:6]]}...")
    assert c_end >= 0.8 * pre_f
    assert c_end - g_end >= 30


def test_ac8_parameter_efficiency(base, first_task, capsys):
    model = base["model"]
    total = model.num_parameters()
    ratios = {r: lora_mod.attach(model, r).num_trainable() / total for r in (2, 4, 8, 16)}
    monotone = all(ratios[a] < ratios[b] for a, b in zip((2, 4, 8), (4, 8, 16)))
    pre_r = pre_acc(base, retained(FORGET))
    results = {8: first_task[0].records[0]}
    for r in (4, 16):
        results[r] = engine.run_task(fresh(base, rank=r), task(1, FORGET), OBJ).records[0]
    forgets = {r: rec.acc_f <= 5 and rec.acc_r >= pre_r - 5 for r, rec in results.items()}
    ok = ratios[8] < 0.02 and monotone and all(forgets.values())
    report(capsys, "AC-8", ok, "ratios " + ", ".join(f"r{r}={100 * v:.2f}%" for r, v in ratios.items())
           + "; " + ", ".join(f"r{r}: Acc_f {rec.acc_f:.1f} Acc_r {rec.acc_r:.1f}" for r, rec in sorted(results.items())))
    assert ratios[8] < 0.02
    assert monotone
    assert all(forgets.values())


def test_ac9_merge_attach_identities(base, first_task, capsys):
    model = base["model"]
    x = np.random.default_rng(9).standard_normal((100, MODEL.seq_len, MODEL.input_dim))
    plain = forward(model, x).data
    attached = lora_mod.attach(model, 8, seed=1)
    d_attach = float(np.max(np.abs(forward(model, x, attached).data - plain)))

    rng = np.random.default_rng(3)
    for pair in attached.pairs.values():
        pair.B.data[...] = rng.standard_normal(pair.B.shape) * 0.05
    before = forward(model, x, attached).data
    merged = lora_mod.merge(attached)
    d_merge = float(np.max(np.abs(forward(model, x, merged).data - before)))
    reattached = lora_mod.attach(model, 8, seed=2, history=merged.history, task=2)
    d_reattach = float(np.max(np.abs(forward(model, x, reattached).data - before)))

    trained = first_task[0].lora  # merged history of a real run
    again = lora_mod.attach(model, 8, seed=5, history=trained.history, task=2)
    d_trained = float(np.max(np.abs(forward(model, x, again).data - forward(model, x, trained).data)))
    worst = max(d_attach, d_merge, d_reattach, d_trained)
    report(capsys, "AC-9", worst == 0.0, f"max |dlogit| attach {d_attach}, merge {d_merge}, "
                                         f"re-attach {d_reattach}, trained history {d_trained}")
    assert worst == 0.0


def test_ac10_determinism_and_io(base, first_task, capsys, tmp_path):
    again = engine.run_task(fresh(base), task(1, FORGET), OBJ)
    csv_a = metrics.write_csv(first_task[0].records)
    csv_b = metrics.write_csv(again.records)
    same_csv = csv_a.encode() == csv_b.encode()

    named = {k: v.data for k, v in base["model"].named_parameters().items()}
    path = tmp_path / "model.gslf"
    io.save_checkpoint(path, named)
    loaded = io.load_checkpoint(path)
    lossless = (sorted(loaded) == sorted(named)
                and all(np.array_equal(loaded[k], named[k].astype(np.float32)) for k in named))
    io.save_checkpoint(tmp_path / "again.gslf", loaded)
    stable = path.read_bytes() == (tmp_path / "again.gslf").read_bytes()
    reloaded = from_named_arrays(MODEL, loaded)
    same_shapes = all(reloaded.named_parameters()[k].shape == v.shape for k, v in named.items())

    blob = path.read_bytes()
    (tmp_path / "cut.gslf").write_bytes(blob[:-7])
    try:
        io.load_checkpoint(tmp_path / "cut.gslf")
        rejected = False
    except io.CheckpointFormatError as exc:
        rejected = exc.offset > 0
    ok = same_csv and lossless and stable and same_shapes and rejected
    report(capsys, "AC-10", ok, f"identical CSV {same_csv}; round trip lossless {lossless and stable}; "
                                f"truncated rejected {rejected}")
    assert same_csv
    assert lossless and stable and same_shapes
    assert rejected
