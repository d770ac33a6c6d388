"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import csv
import json
import struct
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from flare.bench import loglog_slope, run_bench, time_mixer
from flare.checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from flare.cli import main
from flare.data import compute_stats, generate_split, read_pcf, write_pcf
from flare.errors import MagicError, TruncationError, VersionError
from flare.gradcheck import grad_check
from flare.mixer import communication_matrix, flare_mix_fused, flare_mix_materialized
from flare.model import ModelConfig, init_params, model_forward, param_breakdown, param_count
from flare.spectral import dense_spectrum_oracle, flare_spectrum
from flare.tensor import Tensor, mul, sum_all
from flare.train import DETERMINISTIC_COLUMNS, OptimizerState, TrainConfig, evaluate, fit


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
        assert ok, detail
    return emit


def _randomize(params, seed, scale):
    r = np.random.default_rng(seed)
    for t in params.values():
        t.data = (r.standard_normal(t.shape) * scale).astype(t.dtype)
    return params


# 1 -------------------------------------------------------------------------

def test_c1_fused_equals_materialized(report):
    t0 = time.perf_counter()
    r = np.random.default_rng(2024)
    configs = [(1024, 64, 8, 8), (33, 4, 1, 4), (257, 16, 4, 8), (1, 1, 1, 1)]
    while len(configs) < 20:
        configs.append((int(r.integers(1, 1025)), int(r.integers(1, 65)),
                        int(r.integers(1, 9)), int(r.integers(1, 9))))
    worst64 = worst32 = 0.0
    for n, m, h, d in configs:
        q, k, v = (r.standard_normal(s) for s in ((h, m, d), (h, n, d), (h, n, d)))
        ref, _ = flare_mix_materialized(q, k, v)
        y64 = flare_mix_fused(Tensor(q), Tensor(k), Tensor(v)).data
        worst64 = max(worst64, float(np.max(np.abs(y64 - ref))))
        q32, k32, v32 = (a.astype(np.float32) for a in (q, k, v))
        ref32, _ = flare_mix_materialized(*(a.astype(np.float64) for a in (q32, k32, v32)))
        y32 = flare_mix_fused(Tensor(q32), Tensor(k32), Tensor(v32)).data
        assert y32.dtype == np.float32
        worst32 = max(worst32, float(np.max(np.abs(y32 - ref32))))
    elapsed = time.perf_counter() - t0
    ok = worst64 <= 1e-12 and worst32 <= 1e-5 and elapsed < 60
    report(1, "fused == materialized", ok,
           f"{len(configs)} configs, double {worst64:.2e} (<=1e-12), single {worst32:.2e} "
           f"(<=1e-5), {elapsed:.1f}s (<60s)")


# 2 -------------------------------------------------------------------------

def test_c2_low_rank_invariants(report):
    r = np.random.default_rng(7)
    n, m, d = 64, 8, 8
    q, k, v = r.standard_normal((m, d)), r.standard_normal((n, d)), r.standard_normal((n, d))
    w = communication_matrix(q, k)
    rowsum = float(np.max(np.abs(w.sum(axis=1) - 1)))
    sv = np.linalg.svd(w, compute_uv=False)
    rank = int(np.count_nonzero(sv > 1e-8 * sv[0]))
    y = flare_mix_fused(Tensor(q[None]), Tensor(k[None]), Tensor(v[None])).data[0]
    wv = float(np.max(np.abs(w @ v - y)))
    ok = rowsum <= 1e-6 and w.min() >= -1e-12 and rank <= m and wv <= 1e-12
    report(2, "W row-stochastic, rank <= M", ok,
           f"row-sum dev {rowsum:.1e}, min entry {w.min():.1e}, rank {rank} (<= {m}), "
           f"|WV - Y| {wv:.1e}")


# 3 -------------------------------------------------------------------------

def test_c3_spectrum_matches_dense_oracle(report):
    t0 = time.perf_counter()
    lines, ok = [], True
    for n, m in ((50, 4), (200, 16), (512, 32)):
        r = np.random.default_rng(n)
        q, k = r.standard_normal((m, 8)), r.standard_normal((n, 8))
        res = flare_spectrum(q, k)
        ref, _ = dense_spectrum_oracle(q, k)
        rel = float(np.max(np.abs(res.eigenvalues - ref) / np.abs(ref)))
        w = communication_matrix(q, k)
        resid = max(np.linalg.norm(w @ vec - lam * vec) / np.linalg.norm(vec)
                    for lam, vec, null in zip(res.eigenvalues, res.eigenvectors.T, res.null)
                    if not null)
        direct = np.sort(np.linalg.eigvals(w).real)[::-1][:m]
        vs_direct = float(np.max(np.abs(res.eigenvalues - direct)))
        top = abs(res.eigenvalues[0] - 1)
        ok &= rel <= 1e-8 and resid <= 1e-6 and top <= 1e-8 and vs_direct <= 1e-8
        lines.append(f"({n},{m}) rel {rel:.1e} resid {resid:.1e} |l1-1| {top:.1e} "
                     f"vs eig(W) {vs_direct:.1e}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    report(3, "flare_spectrum vs dense oracle", ok, "; ".join(lines) + f"; {elapsed:.1f}s")


# 4 -------------------------------------------------------------------------

@pytest.mark.parametrize("depths", [{}, {"L_kv": 1, "L_ff": 1, "L_io": 1}],
                         ids=["default-depths", "unit-depths"])
def test_c4_end_to_end_gradient(report, depths):
    t0 = time.perf_counter()
    cfg = ModelConfig(B=1, C=8, H=2, M=3, d_in=2, d_out=1, **depths)
    params = _randomize(init_params(cfg, dtype=np.float64), 0, 0.3)
    r = np.random.default_rng(1)
    x, w = r.random((7, 2)), r.standard_normal((7, 1))
    f = lambda: sum_all(mul(model_forward(x, params, cfg), w))
    err = grad_check(f, list(params.values()), h=1e-3, order=4)
    elapsed = time.perf_counter() - t0
    two_point = grad_check(f, list(params.values()), h=1e-6)
    n_params = sum(t.data.size for t in params.values())
    report(4, f"end-to-end gradient check ({'default' if not depths else 'unit'} depths)",
           err <= 1e-4 and elapsed < 300,
           f"{n_params} params, max rel err {err:.2e} (<=1e-4), five-point central "
           f"differences h=1e-3, {elapsed:.1f}s; "
           f"diagnostic only: two-point h=1e-6 gives {two_point:.2e}")


# 5 -------------------------------------------------------------------------

def test_c5_permutation_equivariance(report):
    cfg = ModelConfig(B=2, C=32, H=4, M=8, d_in=3, d_out=1)
    params = _randomize(init_params(cfg), 3, 0.2)
    r = np.random.default_rng(5)
    x = r.random((300, 3)).astype(np.float32)
    y = model_forward(x, params, cfg).data
    worst = 0.0
    for _ in range(5):
        perm = r.permutation(300)
        worst = max(worst, float(np.max(np.abs(model_forward(x[perm], params, cfg).data - y[perm]))))
    report(5, "permutation equivariance", worst <= 1e-5,
           f"5 permutations, max |model(PX) - P model(X)| {worst:.1e} (<=1e-5, single)")


# 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c6_complexity_scaling(report):
    t0 = time.perf_counter()
    flare_ns = [4096, 8192, 16384, 32768, 65536]
    vanilla_ns = [1024, 2048, 4096, 8192]
    flare_rows = run_bench("flare", flare_ns, m=64, c=64, h=8, reps=3, threads=1)
    vanilla_rows = run_bench("vanilla", vanilla_ns, c=64, h=8, reps=3, threads=1)
    s_flare = loglog_slope(flare_ns, [row[5] for row in flare_rows])
    s_vanilla = loglog_slope(vanilla_ns, [row[5] for row in vanilla_rows])
    t_flare = float(np.median(time_mixer("flare", 16384, m=64, reps=3)))
    t_vanilla = float(np.median(time_mixer("vanilla", 16384, reps=1)))
    speedup = t_vanilla / t_flare
    elapsed = time.perf_counter() - t0
    ok = s_flare <= 1.3 and s_vanilla >= 1.7 and speedup >= 10 and elapsed < 900
    report(6, "complexity scaling (1 thread)", ok,
           f"flare slope {s_flare:.2f} (<=1.3), vanilla slope {s_vanilla:.2f} (>=1.7), "
           f"speedup at N=16384 {speedup:.0f}x (>=10), {elapsed:.0f}s")


# 7 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c7_training_efficacy(report):
    t0 = time.perf_counter()
    train, test, _ = generate_split(32, 200, 50, seed=0)
    stats = compute_stats(train)
    model = ModelConfig(B=2, C=32, H=8, M=32, d_in=3, d_out=1)
    cfg = TrainConfig(epochs=100, batch_size=4)

    mean_field = np.mean([s.labels for s in train], axis=0)
    per_point = float(np.mean([np.linalg.norm(mean_field - s.labels) / np.linalg.norm(s.labels)
                               for s in test]))
    scalar = np.full_like(test[0].labels, np.mean([s.labels for s in train]))
    scalar_mean = float(np.mean([np.linalg.norm(scalar - s.labels) / np.linalg.norm(s.labels)
                                 for s in test]))

    results = {}
    with threadpool_limits(limits=1):
        for name, mcfg in (("flare", model), ("no-mix", replace(model, mix=False))):
            params, log, _ = fit(init_params(mcfg), train, test, mcfg, cfg, stats)
            results[name] = float(np.mean(evaluate(params, test, mcfg, stats)))
    elapsed = time.perf_counter() - t0
    flare_err, ablation = results["flare"], results["no-mix"]
    ok = flare_err <= 0.5 * per_point and flare_err <= 0.8 * ablation and elapsed < 45 * 60
    report(7, "Darcy training efficacy", ok,
           f"FLARE test rel L2 {flare_err:.4f}; train-mean field {per_point:.4f} "
           f"(need <= {0.5 * per_point:.4f}); scalar train mean {scalar_mean:.4f}; "
           f"no-mix {ablation:.4f} (need <= {0.8 * ablation:.4f}); {elapsed / 60:.1f} min")


# 8 -------------------------------------------------------------------------

def test_c8_parameter_count(report):
    cfg = ModelConfig(B=8, C=64, H=8, M=64, d_in=2, d_out=1)
    total = param_count(cfg)
    dev = abs(total - 592_000) / 592_000
    breakdown = ", ".join(f"{k}={v}" for k, v in param_breakdown(cfg).items())
    report(8, "parameter count", dev <= 0.15,
           f"{total} vs 592000 ({100 * dev:.2f}% off, <=15%); breakdown (blocks summed over all 8): {breakdown}")


# 9 -------------------------------------------------------------------------

def test_c9_format_robustness(report, tmp_path):
    train, _, _ = generate_split(8, 3, 0, seed=0)
    write_pcf(tmp_path / "a.pcf", train)
    back = read_pcf(tmp_path / "a.pcf")
    pcf_ok = all(a.labels.astype(np.float32).tobytes() == b.labels.tobytes() and
                 a.features.astype(np.float32).tobytes() == b.features.tobytes()
                 for a, b in zip(train, back))
    write_pcf(tmp_path / "b.pcf", back)
    pcf_ok &= (tmp_path / "a.pcf").read_bytes() == (tmp_path / "b.pcf").read_bytes()

    cfg = ModelConfig(B=1, C=8, H=2, M=3, d_in=3, d_out=1)
    params = {k: v.data for k, v in init_params(cfg).items()}
    opt = OptimizerState(3, {k: v + 1 for k, v in params.items()}, {k: v * v for k, v in params.items()})
    checkpoint_save(tmp_path / "a.flck", Checkpoint(cfg, params, opt, step=3))
    ck = checkpoint_load(tmp_path / "a.flck")
    flck_ok = all(ck.params[k].tobytes() == params[k].tobytes() for k in params)
    flck_ok &= all(ck.optimizer.m[k].tobytes() == opt.m[k].tobytes() for k in params)
    checkpoint_save(tmp_path / "b.flck", ck)
    flck_ok &= (tmp_path / "a.flck").read_bytes() == (tmp_path / "b.flck").read_bytes()

    def error_of(loader, path, blob):
        path.write_bytes(blob)
        try:
            loader(path)
        except (MagicError, VersionError, TruncationError) as exc:
            return type(exc)
        return None

    raised = {}
    for fmt, loader, src in (("pcf", read_pcf, tmp_path / "a.pcf"),
                             ("flck", checkpoint_load, tmp_path / "a.flck")):
        blob = src.read_bytes()
        bad = tmp_path / f"bad.{fmt}"
        raised[fmt] = (
            error_of(loader, bad, b"ZZZZ" + blob[4:]),
            error_of(loader, bad, blob[:4] + struct.pack("<I", 99) + blob[8:]),
            error_of(loader, bad, blob[: len(blob) // 2]),
        )
    expected = (MagicError, VersionError, TruncationError)
    errors_ok = all(raised[f] == expected for f in raised)
    summary = {f: [e.__name__ if e else None for e in raised[f]] for f in raised}
    report(9, "format robustness", pcf_ok and flck_ok and errors_ok,
           f"PCF bitwise {pcf_ok}, FLCK bitwise {flck_ok}, magic/version/truncation -> {summary}")


# 10 ------------------------------------------------------------------------

def test_c10_determinism_and_resume(report, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "data"), "--grid", "16",
                 "--n-train", "12", "--n-test", "4", "--seed", "2"]) == 0
    cfg = {"model.B": 2, "model.C": 16, "model.H": 4, "model.M": 8, "train.epochs": 6,
           "train.batch_size": 4, "seed": 11, "checkpoint.every": 3}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    base = ["train", "--config", str(tmp_path / "c.json"), "--data", str(tmp_path / "data")]
    for name in ("a", "b"):
        assert main(base + ["--out", str(tmp_path / name)]) == 0
    assert main(base + ["--out", str(tmp_path / "r"), "--resume",
                        str(tmp_path / "a" / "epoch_0003.flck")]) == 0

    def log(name):
        with open(tmp_path / name / "run.csv") as fh:
            return [[row[c] for c in DETERMINISTIC_COLUMNS] for row in csv.DictReader(fh)]

    def params(name):
        return checkpoint_load(tmp_path / name / "final.flck").params

    repeat_ok = log("a") == log("b") and len(log("a")) == 6
    resume_ok = log("r") == log("a")
    pa, pb, pr = params("a"), params("b"), params("r")
    weights_ok = all(pa[k].tobytes() == pb[k].tobytes() == pr[k].tobytes() for k in pa)
    report(10, "determinism and resume", repeat_ok and resume_ok and weights_ok,
           f"repeat run log identical {repeat_ok}, resumed-at-epoch-3 log identical {resume_ok}, "
           f"final weights bitwise equal {weights_ok} (wall-clock seconds column excluded)")
