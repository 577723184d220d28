"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. The trend test (criterion
5) trains real models and dominates the runtime; everything else finishes in
well under a minute apiece.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import pytest

from recladder import cli
from recladder.ctc import (best_path_decode, ctc_brute_force, ctc_loss,
                           levenshtein, min_frames, per)
from recladder.data import (PairCycler, load_dataset, make_supervised_subset,
                            save_dataset, split_dataset, synth_dataset)
from recladder.errors import ChecksumError
from recladder.features import (Waveform, dct_matrix, deltas,
                                featurize_waveform, frame_signal)
from recladder.ladder import (LadderConfig, compute_norm_stats,
                              decode_feedforward, decode_recurrent, encode,
                              init_model, pad_batch, semi_supervised_loss)
from recladder.layers import NoiseScheme
from recladder.tensor import Rng, Tensor, grad_check
from recladder.trainer import (TrainSettings, evaluate, load_checkpoint,
                               save_checkpoint, train)


@contextmanager
def report(num, title):
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {num} ({title}): FAIL")
        raise
    print(f"\nACCEPTANCE {num} ({title}): PASS")


@dataclass
class Seq:
    features: np.ndarray
    labels: list | None = None


def tiny_config(decoder, variant, sigma=0.4, lambdas=(5.0, 2.0, 0.5)):
    return LadderConfig(input_dim=3, hidden=4, n_classes=2, decoder=decoder,
                        noise=NoiseScheme(variant, sigma), lambdas=lambdas,
                        dtype="float64")


def tiny_batches(seed=0):
    rng = np.random.default_rng(seed)
    labeled = [Seq(rng.normal(size=(3, 3)), [0, 1]),
               Seq(rng.normal(size=(3, 3)), [1])]
    unlabeled = [Seq(rng.normal(size=(3, 3))), Seq(rng.normal(size=(3, 3)))]
    return labeled, unlabeled


def test_c1_ctc_oracle_equivalence():
    with report(1, "CTC oracle equivalence"):
        t0 = time.monotonic()
        rng = np.random.default_rng(101)
        k = 3
        checked = 0
        worst = 0.0
        while checked < 1000:
            T = rng.integers(1, 7)
            L = rng.integers(0, 4)
            labels = rng.integers(0, k, size=L).tolist()
            if min_frames(labels) > T:
                continue
            logits = rng.normal(size=(T, k + 1)) * 2.5
            loss = ctc_loss(Tensor(logits), labels).item()
            probs = np.exp(logits - logits.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            ref = ctc_brute_force(probs, labels)
            worst = max(worst, abs(math.log(ref) - (-loss)))
            checked += 1
        elapsed = time.monotonic() - t0
        print(f"  1000 instances, max |log p| gap {worst:.2e}, {elapsed:.1f}s")
        assert worst < 1e-9
        assert elapsed < 60.0


def test_c2_full_model_gradient_check():
    with report(2, "full-model gradient check"):
        t0 = time.monotonic()
        labeled, unlabeled = tiny_batches(7)
        for decoder in ("RD", "FFD"):
            for variant in ("FFN", "RN"):
                cfg = tiny_config(decoder, variant)
                graph, params = init_model(cfg, Rng(11))

                def loss():
                    return semi_supervised_loss(labeled, unlabeled, params,
                                                cfg, Rng(99))[0]

                err = grad_check(loss, graph.parameters(), eps=1e-5)
                print(f"  {decoder}-{variant}: max rel err {err:.2e}")
                assert err < 1e-4, f"{decoder}-{variant}: {err}"
        elapsed = time.monotonic() - t0
        print(f"  {elapsed:.1f}s")
        assert elapsed < 300.0


def test_c3_degeneration_identities():
    with report(3, "degeneration identities"):
        # sigma = 0: noisy trace is bit-exact equal to the clean trace
        feats, lengths = pad_batch(
            [np.random.default_rng(i).normal(size=(4, 3)) for i in range(3)],
            np.float64)
        for variant in ("FFN", "RN"):
            cfg = tiny_config("RD", variant, sigma=0.0)
            _, params = init_model(cfg, Rng(1))
            trace = encode(feats, lengths, params, cfg, Rng(2))
            for layer in range(3):
                for t in range(trace.n_steps):
                    assert np.array_equal(trace.z[layer][t].data,
                                          trace.z_noisy[layer][t].data)
            for t in range(trace.n_steps):
                assert np.array_equal(trace.y[t].data, trace.y_noisy[t].data)

        # all-zero lambdas: total == c_sup to 1e-12, decoder gradients exactly 0
        cfg = tiny_config("RD", "FFN", sigma=0.4, lambdas=(0.0,) * 3)
        graph, params = init_model(cfg, Rng(3))
        labeled, unlabeled = tiny_batches(8)
        total, comps = semi_supervised_loss(labeled, unlabeled, params, cfg,
                                            Rng(4))
        assert abs(comps["total"] - comps["c_sup"]) < 1e-12
        assert abs(total.item() - comps["c_sup"]) < 1e-12
        grads = graph.backward(total)
        for name, grad in grads.items():
            if name.startswith("dec."):
                assert np.all(grad == 0.0), name

        # O = 0: recurrent decoder equals feed-forward decoder within 1e-12
        cfg = tiny_config("RD", "FFN", sigma=0.5)
        _, params = init_model(cfg, Rng(5))
        for pl in params.dec:
            pl.O.data[:] = 0.0
        trace = encode(feats, lengths, params, cfg, Rng(6))
        rd = decode_recurrent(trace, params.dec)
        ffd = decode_feedforward(trace, params.dec)
        for layer in range(3):
            for t in range(trace.n_steps):
                assert np.abs(rd[layer][t].data
                              - ffd[layer][t].data).max() < 1e-12


def test_c4_normalization_contract():
    with report(4, "normalization contract"):
        for seed in range(5):
            cfg = LadderConfig(input_dim=6, hidden=9, n_classes=3,
                               decoder="RD", noise=NoiseScheme("FFN", 0.5),
                               lambdas=(5.0, 2.0, 0.5), dtype="float64")
            _, params = init_model(cfg, Rng(seed))
            rng = np.random.default_rng(seed)
            feats = [rng.normal(size=(rng.integers(12, 22), 6)) * 2.0
                     for _ in range(8)]
            padded, lengths = pad_batch(feats, np.float64)
            assert sum(lengths) >= 64
            trace = encode(padded, lengths, params, cfg, Rng(seed + 50))
            stats = compute_norm_stats(trace)
            flat = trace.flat_mask().astype(bool)
            for layer in range(3):
                z = np.concatenate([t.data for t in trace.z[layer]], axis=0)
                zn = (z - stats.mu[layer].data) / stats.s[layer].data
                valid = zn[flat]
                assert np.abs(valid.mean(axis=0)).max() < 1e-6
                std = valid.std(axis=0)
                assert np.all(std >= 1 - 1e-4) and np.all(std <= 1 + 1e-4)


# -- criterion 5: synthetic semi-supervised trend ---------------------------

TREND_SEEDS = (1, 2, 3, 4, 5)
TREND_SIGMAS = (0.2, 0.5)
TREND_LAMBDAS = (1000.0, 10.0, 0.1)
TREND_HIDDEN = 48
TREND_EPOCHS = dict(min_epochs=12, max_epochs=18, patience=4)


def _trend_run(decoder, sigma, seed, sup, unsup, valid, out_dir):
    lambdas = (0.0,) * 3 if decoder == "ND" else TREND_LAMBDAS
    cfg = LadderConfig(input_dim=39, hidden=TREND_HIDDEN, n_classes=8,
                       decoder=decoder, noise=NoiseScheme("FFN", sigma),
                       lambdas=lambdas, dtype="float32")
    settings = TrainSettings(lr=0.002, batch_size=64, seed=seed,
                             deterministic_timing=True, **TREND_EPOCHS)
    ckpt, _ = train(cfg, settings, sup, unsup, valid, out_dir)
    return ckpt.metadata["best_valid_per"]


@pytest.mark.slow
def test_c5_synthetic_semi_supervised_trend(tmp_path):
    with report(5, "synthetic semi-supervised trend"):
        t0 = time.monotonic()
        data = synth_dataset(8, 2000, (20, 40), proto_dim=39,
                             noise_level=1.0, seed=0)
        results = {}  # (decoder, sigma) -> {seed: per}
        for seed in TREND_SEEDS:
            trn, val = split_dataset(data, 0.15, Rng(1000 + seed))
            sup = make_supervised_subset(trn, 0.1, 1, Rng(2000 + seed))
            for decoder in ("ND", "RD"):
                for sigma in TREND_SIGMAS:
                    key = (decoder, sigma)
                    out = tmp_path / f"{decoder}_{sigma}_{seed}"
                    value = _trend_run(decoder, sigma, seed, sup, trn, val,
                                       out)
                    results.setdefault(key, {})[seed] = value
                    print(f"  {decoder}-FFN sigma={sigma} seed={seed}: "
                          f"PER {value:.4f} "
                          f"[{(time.monotonic() - t0) / 60:.1f} min]")

        def mean_per(key):
            return float(np.mean(list(results[key].values())))

        best_rd = min((k for k in results if k[0] == "RD"), key=mean_per)
        best_nd = min((k for k in results if k[0] == "ND"), key=mean_per)
        rd_mean = mean_per(best_rd)
        nd_mean = mean_per(best_nd)
        wins = sum(1 for s in TREND_SEEDS
                   if results[best_rd][s] < results[best_nd][s])
        elapsed = time.monotonic() - t0
        print(f"  best RD-FFN sigma={best_rd[1]}: mean PER {rd_mean:.4f}")
        print(f"  best ND-FFN sigma={best_nd[1]}: mean PER {nd_mean:.4f}")
        print(f"  seed-level RD wins: {wins}/5, runtime {elapsed / 60:.1f} min")
        assert rd_mean <= nd_mean + 0.005, (rd_mean, nd_mean)
        assert wins >= 3
        assert elapsed < 45 * 60


def test_c6_metric_correctness():
    with report(6, "metric correctness"):
        assert per([[0, 1], [2]], [[0], [2]]) == pytest.approx(1 / 3,
                                                               abs=1e-15)
        refs = [[1, 2], [3]]
        assert per(refs, refs) == 0.0
        assert per([[1, 2], [3, 4, 5]], [[], []]) == 1.0

        rng = np.random.default_rng(606)
        seqs = [rng.integers(0, 5, size=rng.integers(0, 10)).tolist()
                for _ in range(30_000)]
        checked = 0
        for a, b, c in zip(seqs[0::3], seqs[1::3], seqs[2::3]):
            dab = levenshtein(a, b)
            assert dab == levenshtein(b, a)
            assert levenshtein(a, a) == 0
            assert (dab == 0) == (a == b)
            assert levenshtein(a, c) <= dab + levenshtein(b, c)
            checked += 1
        assert checked == 10_000


def test_c7_data_protocol():
    with report(7, "data protocol"):
        d = synth_dataset(8, 400, (20, 40), proto_dim=5, noise_level=0.2,
                          seed=7)
        full = np.zeros(8)
        for ex in d.examples:
            for s in ex.labels:
                full[s] += 1
        full /= full.sum()
        for seed in range(20):
            sub = make_supervised_subset(d, 0.25, 2, Rng(seed))
            counts = np.zeros(8)
            for ex in sub.examples:
                for s in ex.labels:
                    counts[s] += 1
            assert counts.min() >= 2  # min-count holds exactly, by recount
            frac = counts / counts.sum()
            assert np.abs(frac - full).max() < 0.05

        sup = make_supervised_subset(d, 0.1, 1, Rng(3))
        for batch_size in (16, 7):
            cyc = PairCycler(sup, d, batch_size, Rng(4))
            for _ in range(2):  # two epochs: the budget is exact every epoch
                emitted = []
                for _, unl in cyc.epoch():
                    emitted.extend(ex.id for ex in unl)
                assert sorted(emitted) == sorted(ex.id for ex in d.examples)


def test_c8_reproducibility_and_formats(tmp_path):
    with report(8, "reproducibility and formats"):
        # (config, seed) -> bit-identical metrics across two runs
        data_path = tmp_path / "data.bin"
        assert cli.main(["synth", "--classes", "5", "--sequences", "48",
                         "--min-len", "10", "--max-len", "18", "--dim", "6",
                         "--seed", "3", "--out", str(data_path)]) == 0
        conf = tmp_path / "run.conf"
        conf.write_text(
            "model.hidden = 12\nmodel.decoder = RD\n"
            "model.lambdas = 20,2,0.2\nmodel.sigma = 0.3\n"
            "model.dtype = float32\n"
            "training.lr = 0.005\ntraining.batch = 8\n"
            "training.min_epochs = 2\ntraining.max_epochs = 3\n"
            "training.patience = 2\ntraining.seed = 11\n"
            "training.deterministic_timing = true\n"
            f"data.train = {data_path}\ndata.valid_fraction = 0.25\n"
            "data.label_fraction = 0.5\n")
        for name in ("r1", "r2"):
            assert cli.main(["train", "--config", str(conf), "--out",
                             str(tmp_path / name)]) == 0
        m1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
        m2 = (tmp_path / "r2" / "metrics.csv").read_bytes()
        assert m1 == m2 and len(m1) > 0

        # dataset round-trip is bit-exact; corruption rejected by checksum
        d = load_dataset(data_path)
        again = tmp_path / "again.bin"
        save_dataset(d, again)
        assert again.read_bytes() == data_path.read_bytes()
        blob = bytearray(data_path.read_bytes())
        blob[30] ^= 0x40
        bad = tmp_path / "bad.bin"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_dataset(bad)

        # checkpoint round-trip is bit-exact; corruption rejected
        ckpt_path = tmp_path / "r1" / "checkpoint.bin"
        ckpt = load_checkpoint(ckpt_path)
        resaved = tmp_path / "resaved.bin"
        save_checkpoint(ckpt, resaved)
        assert resaved.read_bytes() == ckpt_path.read_bytes()
        cblob = bytearray(ckpt_path.read_bytes())
        cblob[-12] ^= 0x01
        badc = tmp_path / "badc.bin"
        badc.write_bytes(bytes(cblob))
        with pytest.raises(ChecksumError):
            load_checkpoint(badc)

        # evaluation of the round-tripped checkpoint is identical
        valid_data = load_dataset(data_path)
        per_a, dist_a = evaluate(ckpt, valid_data)
        per_b, dist_b = evaluate(load_checkpoint(resaved), valid_data)
        assert per_a == per_b and dist_a == dist_b


def test_c9_feature_pipeline():
    with report(9, "feature pipeline"):
        m = dct_matrix(40)
        assert np.abs(m @ m.T - np.eye(40)).max() < 1e-10

        const = np.tile(np.arange(13.0), (9, 1))
        d, dd = deltas(const)
        assert np.all(d == 0.0) and np.all(dd == 0.0)

        rng = np.random.default_rng(909)
        for _ in range(100):
            n = int(rng.integers(320, 30000))
            frames = frame_signal(Waveform(np.zeros(n), 16000))
            assert frames.shape[0] == 1 + (n - 320) // 160

        samples = rng.uniform(-0.5, 0.5, size=8000)
        w = Waveform(samples, 16000)
        a = featurize_waveform(w)
        b = featurize_waveform(Waveform(samples.copy(), 16000))
        assert a.shape == b.shape == (a.shape[0], 39)
        assert a.tobytes() == b.tobytes()
