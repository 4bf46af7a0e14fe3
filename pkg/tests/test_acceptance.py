"""The twelve acceptance criteria, one test each.

Every test prints a single ``ACCEPTANCE <n>: PASS|FAIL ...`` line (also
collected into the terminal summary). Thresholds are pinned constants below;
training-based criteria share session-scoped runs made through the CLI.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from discrete_diffusion import autograd as ag
from discrete_diffusion import checkpoint as ck
from discrete_diffusion import cli, experiment
from discrete_diffusion import config as cfgmod
from discrete_diffusion.categorical import corrupt, one_hot
from discrete_diffusion.denoiser import (
    Condition,
    DenoiserSpec,
    EncoderSpec,
    count_parameters,
    denoiser_graph,
    encoder_graph,
    init_denoiser,
    init_encoder,
)
from discrete_diffusion.schedule import alpha_bar, build_schedule
from discrete_diffusion.tasks import bayes_accuracy
from discrete_diffusion.training import (
    TrainConfig,
    TrainState,
    apply_update,
    cfg_dropout,
    collect_grads,
    kfold_expand,
    leaf_tensors,
    objective,
    train_step,
)
from oracles.finite_diff import central_diff, rel_error

pytestmark = [pytest.mark.acceptance]

# pinned thresholds
GRAD_SPECS = 20
GRAD_REL_TOL = 1e-4
MOMENT_DRAWS = 100_000
MOMENT_SIGMAS = 3.0
CE_MIN_ACC = 0.90
MSE_MAX_ACC = 0.20
BAYES_GAP = 0.015
STEP_GAP = 0.010
SHARPNESS_MIN = 0.9
STABILITY_MIN = 0.95
TRACE_SAMPLES = 1000
CFG_SIGMAS = 3.0

BLOB_CONFIG = "task = blobs\nseed = 0\nloss_kind = {loss}\n"
GRAMMAR_CONFIG = """task = grammar
seed = 0
method = {method}
epochs = 40
n_train = 8192
n_test = 1000
batch_size = 128
checkpoint_every = 40
steps = 20
pdd_rounds = 12
"""


def verdict(n, ok, detail):
    line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs


class Runs:
    """Lazily trains each configuration once per session through ``cli.main``."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def get(self, name, text):
        if name not in self.cache:
            path = self.root / f"{name}.cfg"
            path.write_text(text)
            out = self.root / name
            start = time.perf_counter()
            assert cli.main(["train", str(path), "--out", str(out)]) == 0
            elapsed = time.perf_counter() - start
            ckpt = ck.load(out / "final.ckpt")
            _, test = cli.make_datasets(ckpt.config)
            self.cache[name] = (ckpt, test, elapsed, out)
        return self.cache[name]

    def blobs(self, loss):
        return self.get(f"blobs-{loss}", BLOB_CONFIG.format(loss=loss))

    def grammar(self, method):
        return self.get(f"grammar-{method}", GRAMMAR_CONFIG.format(method=method))


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def evaluate(ckpt, ds, **changes):
    cfg = ckpt.config
    return experiment.evaluate(
        ckpt.denoiser,
        ckpt.encoder,
        ds,
        cfgmod.sample_config(cfg, **changes),
        ckpt.schedule,
        method=ckpt.method,
        rounds=cfg["pdd_rounds"],
    )


# ---------------------------------------------------------------------------
# 1. gradient oracle


def _objective_and_grads(den, enc, features, expanded, is_null, loss_kind, s):
    P = leaf_tensors("denoiser", den.tensors)
    E = leaf_tensors("encoder", enc.tensors)
    cond = encoder_graph(E, enc.spec, ag.Tensor(features))
    shared = ag.take_rows(cond, expanded.source)
    logits = denoiser_graph(P, den.spec, ag.Tensor(expanded.noisy), expanded.t, shared, is_null[expanded.source])
    loss, grad = objective(loss_kind, logits.data, expanded, s)
    logits.backward(grad)
    grads = collect_grads("denoiser", P)
    grads.update(collect_grads("encoder", E))
    return loss, grads


def test_1_gradient_oracle():
    start = time.perf_counter()
    s = build_schedule()
    rng = np.random.default_rng(101)
    worst, probes = 0.0, 0
    for _ in range(GRAD_SPECS):
        d = int(rng.integers(2, 5))
        spec = DenoiserSpec(
            K=int(rng.integers(2, 6)),
            cond_dim=d,
            hidden_dim=int(rng.choice([4, 6, 8])),
            depth=int(rng.integers(1, 3)),
            time_embed_dim=int(rng.choice([2, 4, 6])),
            seq_len=int(rng.integers(1, 4)),
        )
        enc_spec = EncoderSpec(d, int(rng.integers(1, 3)), str(rng.choice(["mean", "class_token"])))
        den = init_denoiser(spec, rng, np.float64)
        enc = init_encoder(enc_spec, rng, np.float64)
        # zero-initialised head and null vector would hide most gradients
        for t in list(den.tensors.values()) + list(enc.tensors.values()):
            t[...] = 0.5 * rng.standard_normal(t.shape)
        B = 3
        features = rng.standard_normal((B, int(rng.integers(1, 4)), d))
        expanded = kfold_expand(one_hot(rng.integers(0, spec.K, (B, spec.seq_len)), spec.K), 2, s, rng)
        is_null = np.array([False, True, False])
        params = {f"denoiser.{k}": v for k, v in den.tensors.items()}
        params.update({f"encoder.{k}": v for k, v in enc.tensors.items()})
        names = sorted(params)
        for loss_kind in ("weighted_ce", "unweighted_ce", "mse_noise"):
            _, grads = _objective_and_grads(den, enc, features, expanded, is_null, loss_kind, s)

            def f(loss_kind=loss_kind):
                return _objective_and_grads(den, enc, features, expanded, is_null, loss_kind, s)[0]

            for _ in range(8):
                name = names[rng.integers(len(names))]
                idx = tuple(int(rng.integers(n)) for n in params[name].shape)
                fd = central_diff(f, params[name], idx)
                worst = max(worst, rel_error(grads[name][idx], fd))
                probes += 1
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_REL_TOL and elapsed < 60
    verdict(1, ok, f"{GRAD_SPECS} specs x 3 objectives, {probes} probes, max rel err {worst:.2e} (< {GRAD_REL_TOL:g}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. forward-process moments


def test_2_forward_moments():
    start = time.perf_counter()
    s = build_schedule()
    rng = np.random.default_rng(202)
    K = 4
    y0 = one_hot(np.full((MOMENT_DRAWS, 1), 2), K)
    worst = 0.0
    for t in (1, 10, 100, 500, 1000):
        x = corrupt(y0, t, s, rng).values[:, 0, :]
        ab = alpha_bar(s, t)
        var = 1.0 - ab
        se_mean = math.sqrt(var / MOMENT_DRAWS)
        se_var = var * math.sqrt(2.0 / (MOMENT_DRAWS - 1))
        z_mean = np.abs(x.mean(axis=0) - math.sqrt(ab) * y0[0, 0]) / se_mean
        z_var = np.abs(x.var(axis=0, ddof=1) - var) / se_var
        worst = max(worst, float(z_mean.max()), float(z_var.max()))
    elapsed = time.perf_counter() - start
    ok = worst <= MOMENT_SIGMAS and elapsed < 60
    verdict(2, ok, f"5 timesteps x {K} coords, worst deviation {worst:.2f} SE (<= {MOMENT_SIGMAS:g}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3-9. blobs


def test_3_ce_vs_mse(runs):
    ce, test, t_ce, _ = runs.blobs("weighted_ce")
    mse, _, t_mse, _ = runs.blobs("mse_noise")
    a_ce = evaluate(ce, test)["accuracy"]
    a_mse = evaluate(mse, test)["accuracy"]
    total = t_ce + t_mse
    ok = a_ce >= CE_MIN_ACC and a_mse <= MSE_MAX_ACC and total < 15 * 60
    verdict(3, ok, f"weighted CE {a_ce:.4f} (>= {CE_MIN_ACC}), MSE {a_mse:.4f} (<= {MSE_MAX_ACC}), train {total:.0f}s (< 900s)")


def test_4_near_bayes(runs):
    ce, test, _, _ = runs.blobs("weighted_ce")
    acc = evaluate(ce, test, steps=20)["accuracy"]
    bayes = bayes_accuracy(cfgmod.make_task(ce.config), test.features, test.targets)
    gap = abs(acc - bayes)
    verdict(4, gap <= BAYES_GAP, f"S=20 accuracy {acc:.4f}, Bayes {bayes:.4f}, gap {gap:.4f} (<= {BAYES_GAP})")


def test_5_sampling_steps(runs):
    ce, test, _, _ = runs.blobs("weighted_ce")
    start = time.perf_counter()
    acc = {S: evaluate(ce, test, steps=S)["accuracy"] for S in (1, 10, 20)}
    elapsed = time.perf_counter() - start
    ok = abs(acc[10] - acc[20]) <= STEP_GAP and acc[1] < acc[10] and elapsed < 120
    verdict(5, ok, f"S=1 {acc[1]:.4f}, S=10 {acc[10]:.4f}, S=20 {acc[20]:.4f} (|S10-S20| <= {STEP_GAP}, S1 < S10), {elapsed:.1f}s")


def test_6_onehot_convergence(runs):
    ce, test, _, _ = runs.blobs("weighted_ce")
    start = time.perf_counter()
    rec = evaluate(ce, test.head(TRACE_SAMPLES), steps=20)
    elapsed = time.perf_counter() - start
    sharp, stable = rec["sharpness_final5"], rec["argmax_stability"]
    ok = sharp > SHARPNESS_MIN and stable >= STABILITY_MIN and elapsed < 120
    verdict(6, ok, f"{TRACE_SAMPLES} samples: final-5 sharpness {sharp:.4f} (> {SHARPNESS_MIN}), final-3 stability {stable:.4f} (>= {STABILITY_MIN}), {elapsed:.1f}s")


def test_7_guidance_direction(runs):
    ce, test, _, _ = runs.blobs("weighted_ce")
    start = time.perf_counter()
    off = evaluate(ce, test, guidance_scale=1.0)["accuracy"]
    on = evaluate(ce, test, guidance_scale=cli.GUIDANCE_ON)["accuracy"]
    elapsed = time.perf_counter() - start
    sigma = math.sqrt(off * (1 - off) / len(test))
    ok = on - off >= -CFG_SIGMAS * sigma and elapsed < 120
    verdict(7, ok, f"w={cli.GUIDANCE_ON} {on:.4f} vs w=1 {off:.4f}, margin {on - off:+.4f} (>= -{CFG_SIGMAS:g} sigma = {-CFG_SIGMAS * sigma:.4f}), {elapsed:.1f}s")


def test_8_coefficient_ablation(runs):
    w, test, t_w, _ = runs.blobs("weighted_ce")
    u, _, t_u, _ = runs.blobs("unweighted_ce")
    acc = {}
    for name, ckpt in (("weighted", w), ("unweighted", u)):
        acc[name] = {S: evaluate(ckpt, test, steps=S)["accuracy"] for S in (1, 10, 20)}
    gain_w = acc["weighted"][10] - acc["weighted"][1]
    gain_u = acc["unweighted"][10] - acc["unweighted"][1]
    trained = acc["weighted"][20] >= CE_MIN_ACC and acc["unweighted"][20] >= CE_MIN_ACC
    total = t_w + t_u
    ok = trained and gain_w > gain_u and total < 30 * 60
    verdict(
        8,
        ok,
        f"S=20 weighted {acc['weighted'][20]:.4f} unweighted {acc['unweighted'][20]:.4f} (>= {CE_MIN_ACC}); "
        f"S1->S10 gain weighted {gain_w:+.4f} > unweighted {gain_u:+.4f}; train {total:.0f}s (< 1800s)",
    )


def test_9_argmax_vs_softmax(runs):
    ce, test, _, _ = runs.blobs("weighted_ce")
    start = time.perf_counter()
    arg = evaluate(ce, test, to_one="argmax_onehot")["accuracy"]
    soft = evaluate(ce, test, to_one="softmax_sample", temperature=1.0)["accuracy"]
    elapsed = time.perf_counter() - start
    verdict(9, arg >= soft and elapsed < 120, f"argmax {arg:.4f} >= softmax {soft:.4f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 10. K-fold equivalence


def _explicit_duplication_step(state, features, targets, config, s, rng):
    """Oracle: each encoding is copied ``kfold`` times into a fresh leaf and the
    copies' gradients are summed back one by one, in copy order."""
    k = config.kfold
    dtype = state.denoiser.dtype
    spec = state.denoiser.spec
    targets = targets.reshape(len(targets), -1)
    enc = leaf_tensors("encoder", state.encoder.tensors)
    den = leaf_tensors("denoiser", state.denoiser.tensors)
    cond = encoder_graph(enc, state.encoder.spec, ag.Tensor(features.astype(dtype)))
    B = len(targets)
    is_null = cfg_dropout(Condition(cond.data, np.zeros(B, bool)), config.cfg_dropout_prob, rng).is_null
    expanded = kfold_expand(one_hot(targets, spec.K), k, s, rng)
    copies = ag.Tensor(np.concatenate([np.repeat(cond.data[i : i + 1], k, axis=0) for i in range(B)]), requires_grad=True)
    null_copies = np.concatenate([np.repeat(is_null[i : i + 1], k) for i in range(B)])
    logits = denoiser_graph(den, spec, ag.Tensor(expanded.noisy.astype(dtype)), expanded.t, copies, null_copies)
    loss, grad = objective(config.loss_kind, logits.data, expanded, s)
    logits.backward(grad)
    acc = np.zeros_like(cond.data)
    for r in range(B * k):
        acc[r // k] += copies.grad[r]
    cond.backward(acc)
    grads = collect_grads("denoiser", den)
    grads.update(collect_grads("encoder", enc))
    apply_update(state, grads, config)
    return loss


def _fresh_state(spec, enc_spec, dtype, config, seed):
    rng = np.random.default_rng(seed)
    den = init_denoiser(spec, rng, dtype)
    enc = init_encoder(enc_spec, rng, dtype)
    for name, t in den.tensors.items():
        if name.startswith("out.") or name == "null_condition":
            t[...] = rng.standard_normal(t.shape)
    return TrainState(den, enc, 100, 0)


def test_10_kfold_equivalence():
    start = time.perf_counter()
    s = build_schedule()
    cases = [
        (DenoiserSpec(K=10, cond_dim=16, hidden_dim=64), 1, np.float32),
        (DenoiserSpec(K=64, cond_dim=16, hidden_dim=64, seq_len=12), 12, np.float32),
        (DenoiserSpec(K=6, cond_dim=5, hidden_dim=16, seq_len=3), 3, np.float64),
    ]
    mismatches = []
    for case, (spec, N, dtype) in enumerate(cases):
        config = TrainConfig(kfold=4, cfg_dropout_prob=0.3, learning_rate=1e-2)
        data = np.random.default_rng(case)
        features = data.standard_normal((16, 8, spec.cond_dim))
        targets = data.integers(0, spec.K, (16, N))
        enc_spec = EncoderSpec(spec.cond_dim, 1, "mean")
        a = _fresh_state(spec, enc_spec, dtype, config, 7)
        b = _fresh_state(spec, enc_spec, dtype, config, 7)
        loss_a = train_step(a, features, targets, config, s, np.random.default_rng(11))["loss"]
        loss_b = _explicit_duplication_step(b, features, targets, config, s, np.random.default_rng(11))
        if loss_a != loss_b:
            mismatches.append(f"case {case} loss")
        for name, p in a.flat_params().items():
            q = b.flat_params()[name]
            if p.dtype != q.dtype or p.tobytes() != q.tobytes():
                mismatches.append(f"case {case} {name}")
        for name in a.optimizer.m:
            if a.optimizer.m[name].tobytes() != b.optimizer.m[name].tobytes():
                mismatches.append(f"case {case} moment {name}")
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 10
    verdict(10, ok, f"{len(cases)} specs, kfold=4 step vs explicit duplication: {len(mismatches)} differing arrays, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 11. ADD vs PDD


def test_11_add_vs_pdd(runs):
    add, test, t_add, _ = runs.grammar("add")
    pdd, _, t_pdd, _ = runs.grammar("pdd")
    # same architecture; PDD's MASK entry adds one input row and one output column
    n_add, n_pdd = count_parameters(add.denoiser), count_parameters(pdd.denoiser)
    assert n_pdd - n_add == 2 * add.denoiser.spec.hidden_dim + 1
    r_add = evaluate(add, test)
    r_pdd = evaluate(pdd, test)
    gt = experiment.sequence_rates(test.targets, test.scenes)
    shuffle = np.random.default_rng(0)
    shuffled = experiment.sequence_rates(np.array([shuffle.permutation(q) for q in test.targets]), test.scenes)
    sem = [gt[1], r_add["semantic_match"], r_pdd["semantic_match"], shuffled[1]]
    ordering = all(a > b for a, b in zip(sem, sem[1:]))
    beats = r_add["validity"] > r_pdd["validity"] and r_add["semantic_match"] > r_pdd["semantic_match"]
    total = t_add + t_pdd
    ok = beats and ordering and total < 20 * 60
    verdict(
        11,
        ok,
        f"validity ADD {r_add['validity']:.4f} vs PDD {r_pdd['validity']:.4f}; semantic ADD {r_add['semantic_match']:.4f} vs PDD "
        f"{r_pdd['semantic_match']:.4f}; ordering gt {sem[0]:.3f} > ADD {sem[1]:.3f} > PDD {sem[2]:.3f} > shuffled {sem[3]:.3f}; "
        f"params {n_add}/{n_pdd}; train {total:.0f}s (< 1200s)",
    )


# ---------------------------------------------------------------------------
# 12. determinism


def _strip_timing(path):
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    for r in rows:
        r.pop("wall_ms")
    return rows


def test_12_determinism(runs, tmp_path, capsys):
    failures = []
    small = "task = {task}\nseed = 3\nmethod = {method}\nepochs = 2\nn_train = 96\nn_test = 48\nbatch_size = 32\nhidden_dim = 16\ncheckpoint_every = 1\n"
    commands = 0
    for task, method in (("blobs", "add"), ("grammar", "add"), ("grammar", "pdd")):
        cfg = tmp_path / f"{task}-{method}.cfg"
        cfg.write_text(small.format(task=task, method=method))
        outs = []
        for rep in "ab":
            out = tmp_path / f"{task}-{method}-{rep}"
            captured = {}
            for name, argv in (
                ("train", ["train", str(cfg), "--out", str(out)]),
                ("eval", ["eval", str(out / "final.ckpt"), "--out", str(out / "eval2.json")]),
                ("trace", ["trace", str(out / "final.ckpt"), "--out", str(out / "trace.jsonl"), "--count", "2"]),
                ("data", ["dataset", "gen", "--task", task, "--n", "30", "--seed", "4", "--out", str(out / "d.bin")]),
            ):
                if method == "pdd" and name == "trace":
                    continue
                assert cli.main(argv) == 0
                captured[name] = capsys.readouterr().out
                commands += 1
            outs.append((out, captured))
        (a, ca), (b, cb) = outs
        if ck.checksum(a / "final.ckpt") != ck.checksum(b / "final.ckpt"):
            failures.append(f"{task}/{method} checkpoint")
        if sorted(p.name for p in a.glob("epoch*.ckpt")) != sorted(p.name for p in b.glob("epoch*.ckpt")) or any(
            ck.checksum(p) != ck.checksum(b / p.name) for p in a.glob("epoch*.ckpt")
        ):
            failures.append(f"{task}/{method} periodic checkpoints")
        if _strip_timing(a / "metrics.jsonl") != _strip_timing(b / "metrics.jsonl"):
            failures.append(f"{task}/{method} metrics")
        for name in ("eval.json", "eval2.json", "trace.jsonl", "d.bin"):
            if (a / name).exists() and (a / name).read_bytes() != (b / name).read_bytes():
                failures.append(f"{task}/{method} {name}")
        if ca["eval"] != cb["eval"]:
            failures.append(f"{task}/{method} eval stdout")
    # piggyback: re-evaluate a fully trained checkpoint twice
    ce, _, _, run_dir = runs.blobs("weighted_ce")
    evals = []
    for rep in "ab":
        assert cli.main(["eval", str(run_dir / "final.ckpt"), "--n", "500", "--out", str(tmp_path / f"full-{rep}.json")]) == 0
        evals.append((tmp_path / f"full-{rep}.json").read_bytes())
        commands += 1
    if evals[0] != evals[1]:
        failures.append("trained checkpoint eval")
    verdict(12, not failures, f"{commands} commands run twice, mismatches: {failures or 'none'} (metrics compared without wall_ms)")
