"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one ``CRITERION n: PASS|FAIL ...`` line; the lines are
printed together in the terminal summary (see ``conftest.py``).  Criteria 6
and 7 train on the default synthetic corpus and dominate the runtime.
"""
import itertools
import time

import numpy as np
import pytest

from oracles import ctc_enumerate, param_fd_error
from thubert import cli, ctc, experiment, gan, kmeans
from thubert import encoder as E
from thubert import tensor as T
from thubert.encoder import ConvEncoderConfig, MaskSpec, TransformerConfig
from thubert.pretrain import PretrainConfig, PretrainModel
from thubert.tensor import Tensor

RESULTS = {}
SEEDS = (0, 1, 2)


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def rng(seed):
    return np.random.default_rng(seed)


def random_probs(t, v, seed):
    z = rng(seed).standard_normal((t, v))
    return np.exp(z) / np.exp(z).sum(1, keepdims=True)


# ------------------------------------------------------------ 1. gradients


def gradient_errors(seed):
    """Worst relative FD error for each differentiable loss on toy models."""
    r = rng(seed)
    v, t = 4, 6
    real = np.eye(v)[r.integers(0, v, (1, 7))]
    d = gan.Discriminator(v, r, channels=6, kernel=3)
    g = gan.Generator(5, v, r, kernel=3, aux_codes=3)
    frames = r.standard_normal((t, 5))
    codes = r.integers(0, 3, t)
    z0 = r.standard_normal((t, v))
    err = {}

    err["gan/d"] = max(
        T.finite_diff_check(lambda x: gan.loss_gan(d, T.reshape(T.softmax(x), (1, t, v)), real), z0),
        param_fd_error(lambda: gan.loss_gan(d, T.softmax(Tensor(z0))[None], real), d.parameters(), seed=seed))
    err["sp"] = T.finite_diff_check(lambda x: gan.loss_sp(T.softmax(x)), z0)
    err["pd"] = T.finite_diff_check(lambda x: gan.loss_pd(T.softmax(x)), z0)
    err["ss"] = T.finite_diff_check(lambda x: gan.loss_ss(x, codes), z0[:, :3])

    def generator_objective():
        logits, probs = gan.generator_forward(g, frames)
        pooled, mask = gan.segment_pool(probs, [t])
        return (gan.loss_gan(d, pooled, real, "generator", fake_mask=mask) + 0.5 * gan.loss_sp(probs)
                + 3.0 * gan.loss_pd(probs) + 0.5 * gan.loss_ss(g.aux_logits(logits), codes))

    err["gan/g+sp+pd+ss"] = param_fd_error(generator_objective, g.parameters(), seed=seed)

    fake = random_probs(2 * t, v, seed).reshape(2, t, v)
    reals = np.eye(v)[r.integers(0, v, (2, 5))]
    gp_rng = seed + 1000
    err["gp"] = param_fd_error(lambda: gan.loss_gp(d, reals, fake, rng(gp_rng)), d.parameters(), seed=seed)

    enc = TransformerConfig(layers=2, dim=8, ffn=16, heads=2, input_dim=5, dropout=0.0)
    pcfg = PretrainConfig(layer_k=1, vocab_k=3, vocab_top=4, embed_dim=4, steps=0, batch_size=2,
                          crop_frames=8, seed=seed)
    model = PretrainModel(enc, pcfg)
    x, tk, tt = r.standard_normal((2, 6, 5)), r.integers(0, 3, (2, 6)), r.integers(0, 4, (2, 6))
    mask = r.random((2, 6)) < 0.5
    mask[0, 0] = True
    params = [model.encoder.proj.weight, model.encoder.blocks[0].fc1.weight, model.encoder.mask_emb,
              model.head_k.proj.weight, model.head_k.codes, model.head_top.proj.weight, model.head_top.codes]
    err["masked-prediction"] = param_fd_error(lambda: model.loss(x, tk, tt, mask)[0], params,
                                              max_entries=8, seed=seed)

    target = list(r.integers(1, v, 3))
    err["ctc"] = T.finite_diff_check(lambda z: ctc.ctc_loss(T.log_softmax(z), target), r.standard_normal((7, v)))
    return err


def test_criterion_1_gradients():
    worst = {}
    for seed in range(10):
        for name, e in gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    tol = {name: 1e-3 if name == "gp" else 1e-4 for name in worst}
    bad = [n for n in worst if not worst[n] < tol[n]]
    detail = " ".join(f"{n}={worst[n]:.1e}" for n in sorted(worst))
    report(1, not bad, f"10 seeds, worst rel err: {detail}" + (f" over tol: {bad}" if bad else ""))


# ------------------------------------------------------------- 2. CTC oracle


def test_criterion_2_ctc_oracle():
    checked = worst = 0
    beams_ok = True
    for t, v in itertools.product(range(1, 7), range(2, 5)):
        for seed in range(3):
            z = rng(1000 * t + 10 * v + seed).standard_normal((t, v)) * 1.3
            lp = z - np.log(np.exp(z).sum(1, keepdims=True))
            table = ctc_enumerate(lp)
            for n in range(4):
                for target in itertools.product(range(1, v), repeat=n):
                    if ctc.min_frames(list(target)) > t:
                        with pytest.raises(ValueError):
                            ctc.ctc_loss(lp, list(target))
                        continue
                    worst = max(worst, abs(ctc.ctc_loss(lp, list(target)).item() + table[target]))
                    checked += 1
            best = max(table.values())
            hyp, score = ctc.ctc_beam_decode(lp, v**t)
            beams_ok &= abs(score - best) <= 1e-9 and abs(table[tuple(hyp)] - best) <= 1e-9
    report(2, worst <= 1e-9 and beams_ok,
           f"{checked} feasible instances, max |loss - enumeration| = {worst:.1e}; exhaustive beam best: {beams_ok}")


# ---------------------------------------------------------------- 3. k-means


def test_criterion_3_kmeans():
    monotone = exact = True
    for seed in range(100):
        r = rng(seed)
        x = r.standard_normal((int(r.integers(20, 150)), int(r.integers(1, 6))))
        cb = kmeans.fit_kmeans(x, int(r.integers(1, 8)), seed=seed)
        hist = cb.distortions
        monotone &= all(b <= a for a, b in zip(hist, hist[1:]))
        q = r.standard_normal((50, x.shape[1])) * 2
        brute = ((q[:, None, :] - cb.centroids[None]) ** 2).sum(-1)
        ref = np.array([min(range(len(row)), key=lambda j: (row[j], j)) for row in brute])
        exact &= np.array_equal(kmeans.assign(cb, q).codes, ref)
    report(3, monotone and exact, f"100 datasets: distortion non-increasing {monotone}, assign == exhaustive {exact}")


# ------------------------------------------------------ 4. encoder geometry


def simulate_length(n, kernels, strides):
    t = n
    for k, s in zip(kernels, strides):
        count, pos = 0, 0
        while pos + k <= t:
            count += 1
            pos += s
        t = count
    return t


def test_criterion_4_encoder_geometry():
    cfg = ConvEncoderConfig()
    lengths = rng(4).integers(400, 80000, 200)
    lengths_ok = all(E.output_length(cfg, int(n)) == simulate_length(int(n), cfg.kernels, cfg.strides)
                     for n in lengths)
    one_second = E.output_length(cfg, 16000)
    spec = MaskSpec(p=0.08, span=10)
    cover = np.mean([E.compute_mask((1, 1000), spec, rng(s)).mean() for s in range(100)])
    expect = 1 - 0.92**10
    ok = lengths_ok and one_second == 49 and abs(cover - expect) <= 0.05
    report(4, ok, f"200 lengths match simulation {lengths_ok}; 16000 -> {one_second} frames; "
                  f"mask coverage {cover:.3f} vs {expect:.3f}")


# ---------------------------------------------- 5. masked-prediction loss


def test_criterion_5_masked_prediction_semantics():
    enc = TransformerConfig(layers=2, dim=16, ffn=32, heads=2, input_dim=5, dropout=0.0)
    cfg = PretrainConfig(layer_k=1, vocab_k=3, vocab_top=4, embed_dim=6, steps=0, batch_size=2, crop_frames=8)
    model = PretrainModel(enc, cfg)
    r = rng(5)
    x, tk, tt = r.standard_normal((2, 10, 5)), r.integers(0, 3, (2, 10)), r.integers(0, 4, (2, 10))
    empty = model.loss(x, tk, tt, np.zeros((2, 10), dtype=bool))[0].item()

    mask = r.random((2, 10)) < 0.4
    base = model.loss(x, tk, tt, mask)[0].item()
    tk2, tt2 = tk.copy(), tt.copy()
    tk2[~mask] = (tk2[~mask] + 1) % 3
    tt2[~mask] = (tt2[~mask] + 3) % 4
    invariant = model.loss(x, tk2, tt2, mask)[0].item() == base

    model.head_k.codes.data[:] = 1.0
    model.head_top.codes.data[:] = 1.0
    m = int(mask.sum())
    uniform = model.loss(x, tk, tt, mask)[0].item()
    expect = m * (np.log(3) + np.log(4))
    ok = empty == 0.0 and abs(uniform - expect) <= 1e-12 * expect and invariant
    report(5, ok, f"empty mask {empty}; identical embeddings {uniform:.12f} vs m(lnVk+lnVL) {expect:.12f}; "
                  f"unmasked-target perturbation bit-identical {invariant}")


# ------------------------------------------------- 6, 7. synthetic training


@pytest.fixture(scope="module")
def runs():
    """Default synthetic corpus and one adversarial tokenizer per seed."""
    cfg = experiment.RunConfig()
    out = {}
    for seed in SEEDS:
        data = experiment.prepare(cfg, seed)
        out[seed] = (data, experiment.run_gan(cfg, data))
    return cfg, out


def test_criterion_6_gan_mapping_accuracy(runs):
    cfg, out = runs
    accs = [out[s][1].accuracy for s in SEEDS]
    mean = float(np.mean(accs))
    report(6, mean >= 0.75, f"{cfg.gan.steps} steps, accuracy per seed {[round(a, 3) for a in accs]}, "
                            f"mean {mean:.3f} (need >= 0.75, chance 0.125)")


def test_criterion_7_end_to_end_benefit(runs):
    cfg, out = runs
    rows = [experiment.end_to_end(cfg, s, out[s][1], out[s][0]) for s in SEEDS]
    ordered = sum(r["gan+kmeans"] < r["kmeans"] < r["random"] for r in rows)
    rel = [(r["random"] - r["gan+kmeans"]) / r["random"] for r in rows]
    gain = float(np.mean(rel))
    table = "; ".join(f"seed {r['seed']}: {r['gan+kmeans']:.3f} < {r['kmeans']:.3f} < {r['random']:.3f}"
                      for r in rows)
    report(7, ordered >= 2 and gain >= 0.30,
           f"PER (gan+kmeans < kmeans < random) {table}; ordering in {ordered}/3 seeds, "
           f"mean relative gain over random {gain:.1%}")


# ---------------------------------------------------------- 8. ablations


SMALL = ["n_utts=60", "n_test=10", "gan.steps=40", "pretrain.steps=20", "finetune.steps=20",
         "encoder.layers=3", "pretrain.layer_k=2"]


def cli_run(*argv):
    return cli.main([x for kv in SMALL for x in ("--set", kv)] + list(argv))


def read_table(path):
    return [line.split("\t") for line in path.read_text().splitlines()]


def test_criterion_8_ablation_harness(tmp_path, capsys):
    t0 = time.time()
    ok_k = cli_run("ablate", "layer-k", "--values", "1,2", "--out", str(tmp_path / "k.tsv")) == 0
    ok_r = cli_run("ablate", "text-ratio", "--values", "1:0.5,1:1", "--out", str(tmp_path / "r.tsv")) == 0
    k_rows = read_table(tmp_path / "k.tsv") if ok_k else []
    r_rows = read_table(tmp_path / "r.tsv") if ok_r else []
    complete = (k_rows[:1] == [["k", "per"]] and [r[0] for r in k_rows[1:]] == ["1", "2"]
                and r_rows[:1] == [["ratio", "gan_accuracy", "per"]] and [r[0] for r in r_rows[1:]] == ["1:0.5", "1:1"]
                and all(np.isfinite(float(c)) for row in k_rows[1:] + r_rows[1:] for c in row[1:]))
    capsys.readouterr()

    t1 = time.time()
    code = cli_run("ablate", "text-ratio", "--values", "1:1,1:0", "--out", str(tmp_path / "none.tsv"))
    err = capsys.readouterr().err
    fast = time.time() - t1 < 5.0
    clear = code == 2 and "without text" in err and not (tmp_path / "none.tsv").exists()
    report(8, complete and clear and fast,
           f"layer-k and text-ratio tables complete {complete} ({time.time() - t0:.0f}s); "
           f"1:0 rejected with exit {code} before any training {fast}")


# ---------------------------------------------------------- 9. determinism


def test_criterion_9_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("THBT_THREADS", "1")
    base = ["--set", "n_utts=40", "--set", "pretrain.steps=50", "--seed", "3"]
    assert cli.main(base + ["synth-data", "--out", str(tmp_path / "d")]) == 0
    assert cli.main(base + ["features", "--manifest", str(tmp_path / "d/speech.tsv"), "--out",
                            str(tmp_path / "f")]) == 0
    feats = str(tmp_path / "f/features.tsv")
    assert cli.main(base + ["kmeans", "fit", "--features", feats, "--out", str(tmp_path / "c.kmns")]) == 0
    assert cli.main(base + ["kmeans", "assign", "--features", feats, "--codebook", str(tmp_path / "c.kmns"),
                            "--out", str(tmp_path / "c.codes")]) == 0
    for name in ("a.ckpt", "b.ckpt"):
        assert cli.main(base + ["pretrain", "--features", feats, "--kmeans-codes", str(tmp_path / "c.codes"),
                                "--out", str(tmp_path / name)]) == 0
    a, b = (tmp_path / "a.ckpt").read_bytes(), (tmp_path / "b.ckpt").read_bytes()
    report(9, a == b, f"two 50-step pre-training runs, THBT_THREADS=1: checkpoints bit-identical {a == b} "
                      f"({len(a)} bytes)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
