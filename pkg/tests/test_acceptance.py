"""Acceptance criteria 1-10.

Every test records one ``criterion N: PASS|FAIL ...`` line; the lines are
printed together in the terminal summary (see ``conftest.py``).  Criteria 3,
5, 6 and 10 use the cached toy models from :mod:`srqh.toyrun`.
"""

import os
import subprocess
import sys
import time

import gradcases
import numpy as np
import pytest
from scipy.special import ndtr
from test_enhancement import TABLE_CHAINS

from srqh import basecodec as bc
from srqh import cli, codec, container, core, enhancement, entropy, metrics, octree, synthetic
from srqh.core import CodingConfig, PointCloud, SparseTensor
from srqh.enhancement import CoordStreams, EnhancementRecord, InvalidLayerChain, LayerConfig

N_ROUND_TRIP = 1000
REGION = 32


@pytest.fixture
def report(record_property):
    def _report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        record_property("acceptance", line)
        assert ok, line

    return _report


# ----------------------------------------------------------------- 1: lossless round-trips
def _random_coords(rng, side=64, max_n=1500):
    return core.sort_unique(rng.integers(0, side, (int(rng.integers(1, max_n)), 3)))


def _random_rans(rng, n=None):
    n = int(rng.integers(0, 200)) if n is None else n
    sigma = rng.uniform(0.2, 5.0, n)
    sym = np.clip(np.round(rng.normal(0, sigma)), *entropy.SUPPORT).astype(np.int64)
    return entropy.rans_encode(sym, entropy.GaussianModel(0.0, sigma))


def _random_octree(rng):
    return octree.octree_encode(_random_coords(rng, 8, 60), 3)


def _random_block_record(rng):
    return bc.BlockRecord(int(rng.integers(0, 2 ** 40)), int(rng.integers(1, 5000)), _random_octree(rng),
                          _random_rans(rng), _random_rans(rng))


def _random_enh_record(rng, up):
    idx, k = int(rng.integers(0, 2 ** 40)), int(rng.integers(1, 5000))
    if rng.random() < 0.3:
        return EnhancementRecord(idx, k, mode=enhancement.MODE_INTRA, intra=_random_block_record(rng))
    coords = None
    if up:
        coords = CoordStreams(_random_rans(rng), _random_octree(rng) if rng.random() < 0.5 else None)
    return EnhancementRecord(idx, k, _random_rans(rng), coords)


def _random_chain(rng):
    chain = [CodingConfig(int(rng.integers(1, 6)), int(rng.choice([1, 2, 4])), bool(rng.integers(0, 2)))]
    for _ in range(int(rng.integers(0, 4))):
        s = chain[-1]
        sf = s.sf // 2 if s.sf > 1 and rng.random() < 0.5 else s.sf
        chain.append(CodingConfig(int(rng.integers(max(1, s.qp - 1), 6)), sf, bool(rng.integers(0, 2))))
    return chain


class TestCriterion1:
    def test_lossless_round_trips(self, report):
        t0 = time.process_time()
        bad = {"octree": 0, "rans": 0, "coord-enhancement": 0, "container": 0}
        rq = enhancement.init_rqulpe(seed=21)
        for i in range(N_ROUND_TRIP):
            rng = np.random.default_rng(10_000 + i)
            # octree over a block of at most 64^3
            c = _random_coords(rng)
            if not np.array_equal(octree.octree_decode(octree.octree_encode(c, 6)), c):
                bad["octree"] += 1
            # rANS under a random Gaussian model
            n = int(rng.integers(1, 3000))
            mu, sigma = rng.normal(0, 3, n), rng.uniform(0.05, 20, n)
            sym = np.clip(np.round(rng.normal(mu, sigma)), *entropy.SUPPORT).astype(np.int64)
            model = entropy.GaussianModel(mu, sigma)
            if not np.array_equal(entropy.rans_decode(entropy.rans_encode(sym, model), model, n), sym):
                bad["rans"] += 1
            # coordinate enhancement: source latents of a <=64^3 block at sf 2, targets at sf 1
            src = _random_coords(rng, 4, 40)
            ys = SparseTensor(src, rng.normal(0, 2, (len(src), bc.C_Y)))
            kids = core.child_candidates(src)
            tgt = kids[rng.random(len(kids)) < rng.uniform(0.05, 0.9)]
            if rng.random() < 0.2:
                tgt = np.concatenate([tgt, _random_coords(rng, 8, 4)])
            tgt = core.sort_unique(tgt) if len(tgt) else kids[:1]
            qp = int(rng.integers(1, 6))
            streams = enhancement.code_coord_enhancement(rq, ys, qp, tgt)
            if not np.array_equal(enhancement.decode_coord_enhancement(rq, ys, qp, streams), tgt):
                bad["coord-enhancement"] += 1
            # container with random layers and records
            chain = _random_chain(rng)
            cont = container.Container(int(rng.integers(1, 22)), REGION, int(rng.integers(0, 2 ** 31)), chain)
            cont.layers = [[_random_block_record(rng) for _ in range(int(rng.integers(0, 4)))]]
            for t in range(1, len(chain)):
                cont.layers.append([_random_enh_record(rng, cont.layer_up(t)) for _ in range(int(rng.integers(0, 4)))])
            data = cont.serialize()
            back = container.parse(data)
            if back.layers != cont.layers or back.chain != chain or back.serialize() != data:
                bad["container"] += 1
        elapsed = time.process_time() - t0
        ok = not any(bad.values()) and elapsed < 300
        report(1, ok, f"mismatches over {N_ROUND_TRIP} instances each {bad}; {elapsed:.0f} s CPU (limit 300 s)")


# ----------------------------------------------------------------- 2: rate vs entropy
class TestCriterion2:
    N = 100_000

    def _check(self, name, sym, model, nll):
        stream = entropy.rans_encode(sym, model)
        bits = 8 * len(stream.payload)
        return abs(bits - nll) <= 0.02 * nll + 64, f"{name} {bits} vs {nll:.0f} bits"

    def test_rate_matches_entropy(self, report):
        rng = np.random.default_rng(2)
        results = []
        # Gaussian (tails are never reached at these widths)
        sigma = rng.uniform(0.3, 8.0, self.N)
        sym = np.clip(np.round(rng.normal(0, sigma)), *entropy.SUPPORT).astype(np.int64)
        p = ndtr((sym + 0.5) / sigma) - ndtr((sym - 0.5) / sigma)
        results.append(self._check("gaussian", sym, entropy.GaussianModel(0.0, sigma), -np.log2(p).sum()))
        # factorized: 16 channels, each with its own random pmf
        a = entropy.SUPPORT[1] - entropy.SUPPORT[0] + 1
        pmfs = rng.dirichlet(np.full(a, 0.05), 16)
        pmfs = 0.999 * pmfs + 0.001 / a
        chan = rng.integers(0, 16, self.N)
        sym = np.zeros(self.N, dtype=np.int64)
        for c in range(16):
            sym[chan == c] = rng.choice(a, int(np.sum(chan == c)), p=pmfs[c])
        nll = -np.log2(pmfs[chan, sym]).sum()
        model = entropy.IndexedModel(entropy.pmf_to_cdf(pmfs), chan)
        results.append(self._check("factorized", sym + entropy.SUPPORT[0], model, nll))
        # Bernoulli
        p = rng.uniform(0.02, 0.98, self.N)
        bits = (rng.random(self.N) < p).astype(np.int64)
        nll = -np.log2(np.where(bits == 1, p, 1 - p)).sum()
        results.append(self._check("bernoulli", bits, entropy.BernoulliModel(p), nll))
        report(2, all(ok for ok, _ in results), "; ".join(d for _, d in results) + " (tolerance 2% + 64 bits)")


# ----------------------------------------------------------------- 3: scalable-decode equivalence
ALL_CONFIGS = [CodingConfig(q, s) for q in bc.QPS for s in (1, 2, 4)]


def _successors(cfg):
    out = []
    for t in ALL_CONFIGS:
        try:
            enhancement.validate_layer_chain([cfg, t])
        except InvalidLayerChain:
            continue
        out.append(t)
    return out


def equivalence_blocks():
    """One small cloud spread over two 32^3 regions (blocks at every sf)."""
    rng = np.random.default_rng(33)
    a = synthetic.make_shape("torus", 10, rng).points + 10
    b = synthetic.make_shape("sphere", 8, rng).points + [36, 12, 12]
    return PointCloud.from_points(np.concatenate([a, b]))


class TestCriterion3:
    def test_scalable_decode_equivalence(self, report, seq_models, rq_models):
        pc = equivalence_blocks()
        models, rq = seq_models, rq_models
        succ = {c: _successors(c) for c in ALL_CONFIGS}
        stats = {"chains": 0, "latent_mismatch": 0, "recon_mismatch": 0, "blocks": 0}

        def visit(chain, layers, dec_latents):
            """``layers``: encoder LayerResults; ``dec_latents``: decoder-side latents of the last layer."""
            for t_cfg in succ[chain[-1]]:
                cfg = LayerConfig(chain[-1], t_cfg)
                enc = enhancement.encode_enhancement_layer(pc, layers[-1].latents, cfg, models, rq, REGION,
                                                           mode_decision=False)
                new_chain, new_layers = chain + [t_cfg], layers + [enc]
                cont = container.Container(codec.grid_depth(pc), REGION, len(pc.points), new_chain,
                                           [lr.records for lr in new_layers])
                t = len(new_chain) - 1
                parsed = container.parse(cont.serialize(), upto=t)
                dec = enhancement.decode_enhancement_layer(parsed.layers[t], dec_latents, cfg, models, rq, REGION)
                stats["chains"] += 1
                stats["blocks"] += len(enc.latents)
                if set(dec.latents) != set(enc.latents) or any(
                        not np.array_equal(dec.latents[i].coords, enc.latents[i].coords)
                        or not np.array_equal(dec.latents[i].features, enc.latents[i].features)
                        for i in enc.latents):
                    stats["latent_mismatch"] += 1
                if not np.array_equal(dec.points.points, enc.points.points):
                    stats["recon_mismatch"] += 1
                if len(new_chain) < 4:
                    visit(new_chain, new_layers, dec.latents)

        t0 = time.process_time()
        for base_cfg in ALL_CONFIGS:
            base = enhancement.encode_base_layer(pc, base_cfg, models, REGION)
            cont = container.Container(codec.grid_depth(pc), REGION, len(pc.points), [base_cfg], [base.records])
            dec = enhancement.decode_base_layer(container.parse(cont.serialize()).layers[0], base_cfg, models, REGION,
                                                synthesize=False)
            visit([base_cfg], [base], dec.latents)
        ok = stats["chains"] == 95 + 528 + 2652 and not stats["latent_mismatch"] and not stats["recon_mismatch"]
        report(3, ok, f"{stats['chains']} chain prefixes ({stats['blocks']} block decodes): "
                      f"{stats['latent_mismatch']} latent and {stats['recon_mismatch']} reconstruction mismatches; "
                      f"{time.process_time() - t0:.0f} s CPU")


# ----------------------------------------------------------------- 4: gradients
OPS = {
    "dense": ["dense"],
    "sparse conv": ["sparse_conv", "sparse_conv_stride2", "sparse_conv_1x1"],
    "deconv": ["deconv"],
    "vector attention": ["vector_attention"],
    "embeddings": ["embedding"],
    "focal loss": ["focal_loss"],
    "Gaussian NLL": ["gaussian_nll"],
}


class TestCriterion4:
    def test_gradients(self, report):
        worst = {}
        for op, cases in OPS.items():
            worst[op] = max(gradcases.CASES[c](i) for c in cases for i in range(gradcases.N_INSTANCES))
        ok = all(v < gradcases.TOL for v in worst.values())
        detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        report(4, ok, f"max relative FD error over {gradcases.N_INSTANCES} instances: {detail} (limit 1e-4)")


# ----------------------------------------------------------------- 5: latent alignment
class TestCriterion5:
    def test_sequential_latents_align(self, report, toy_settings, seq_models, ind_models):
        val = toy_settings.val_clouds()
        seq = cli.latent_store(seq_models, val, toy_settings.region)
        ind = cli.latent_store(ind_models, val, toy_settings.region)
        s11 = metrics.cosine_matrix(seq, 1, 1, "sequential")
        i11 = metrics.cosine_matrix(ind, 1, 1, "independent")
        s21 = metrics.cosine_matrix(seq, 2, 1, "sequential")
        wins = int(np.sum(s11.off_diagonal() > i11.off_diagonal()))
        margin = float(np.nanmean(s11.matrix - s21.matrix))
        cpu = seq_models.meta.get("cpu_seconds", np.nan) + ind_models.meta.get("cpu_seconds", np.nan)
        ok = wins == 20 and margin > 0 and cpu <= 3600
        report(5, ok, f"sequential > independent on {wins}/20 off-diagonal pairs "
                      f"(mean {np.mean(s11.off_diagonal()):.3f} vs {np.mean(i11.off_diagonal()):.3f}); "
                      f"mean(sf 1,1 - sf 2,1) = {margin:+.3f}; training {cpu:.0f} s CPU (limit 3600 s)")


# ----------------------------------------------------------------- 6: scalability vs concatenation
CHAIN_6 = "4,2,F;3,1,F;4,1,F"


class TestCriterion6:
    def test_scalable_beats_concatenation(self, report, toy_settings, seq_models, rq_models):
        chain = core.parse_chain(CHAIN_6)
        scal, solo = 0, 0
        for pc in toy_settings.val_clouds():
            scal += len(codec.encode_scalable(pc, chain, seq_models, rq_models, toy_settings.region).data)
            solo += sum(len(codec.encode_scalable(pc, [c], seq_models, None, toy_settings.region).data)
                        for c in chain)
        report(6, scal < solo, f"chain {CHAIN_6} on {toy_settings.n_val} held-out clouds: scalable {scal} bytes "
                               f"vs {solo} bytes for three standalone streams ({100 * (scal / solo - 1):+.1f}%)")


# ----------------------------------------------------------------- 7: metric oracles
class TestCriterion7:
    def test_metric_oracles(self, report):
        worst = 0.0
        for i in range(10):
            rng = np.random.default_rng(700 + i)
            a = rng.uniform(0, 100, (int(rng.integers(10, 1000)), 3))
            b = a[: int(rng.integers(5, len(a)))] + rng.normal(0, 1, (1, 3))
            b = np.concatenate([b, rng.uniform(0, 100, (int(rng.integers(1, 200)), 3))])
            na = rng.normal(size=a.shape)
            na /= np.linalg.norm(na, axis=1, keepdims=True)
            d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
            d1 = max(d.min(0).mean(), d.min(1).mean())
            j, k = d.argmin(0), d.argmin(1)
            d2 = max(((((b - a[j]) * na[j]).sum(1)) ** 2).mean(), ((((b[k] - a) * na).sum(1)) ** 2).mean())
            worst = max(worst, abs(metrics.d1_mse(a, b) - d1), abs(metrics.d2_mse(a, b, na) - d2))
        rates, psnr = [0.1, 0.2, 0.4, 0.8, 1.6], [30.0, 33.0, 35.5, 37.5, 39.0]
        ref = [metrics.RdPoint(r, q) for r, q in zip(rates, psnr)]
        same = metrics.bd_metrics(ref, ref).bd_rate
        double = metrics.bd_metrics(ref, [metrics.RdPoint(2 * r, q) for r, q in zip(rates, psnr)]).bd_rate
        ok = worst <= 1e-9 and abs(same) < 1e-9 and abs(double - 100) <= 0.5
        report(7, ok, f"D1/D2 max deviation from brute force {worst:.1e}; BD-rate identical {same:+.2e}%, "
                      f"doubled rate {double:+.3f}%")


# ----------------------------------------------------------------- 8: constraint gate


class TestCriterion8:
    def test_constraint_gate(self, report):
        accepted = 0
        for text in TABLE_CHAINS:
            try:
                enhancement.validate_layer_chain(core.parse_chain(text))
                accepted += 1
            except InvalidLayerChain:
                pass
        diags = []
        for bad, rule in (([(3, 4), (3, 1)], "sf-ratio"), ([(5, 1), (3, 1)], "qp-step"),
                          ([(2, 2), (3, 2), (5, 2), (3, 2)], "qp-step")):
            try:
                enhancement.validate_layer_chain(bad)
                diags.append(None)
            except InvalidLayerChain as exc:
                diags.append(rule if [v[3] for v in exc.violations] == [rule] and "rule " + rule in str(exc)
                             else None)
        ok = accepted == len(TABLE_CHAINS) and all(diags)
        report(8, ok, f"{accepted}/{len(TABLE_CHAINS)} table chains accepted (with the 4,2,T fix row); "
                      f"rejections diagnosed as {diags}")


# ----------------------------------------------------------------- 9: determinism
def _run(args, cwd):
    env = dict(os.environ, PYTHONHASHSEED="0")
    return subprocess.run([sys.executable, "-m", "srqh.cli"] + args, cwd=cwd, env=env, check=True,
                          capture_output=True, text=True)


class TestCriterion9:
    def test_determinism(self, report, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("corpus = synthetic:2\nval_corpus = synthetic:1\ngrid = 32\nepochs_first = 2\n"
                       "epochs_next = 1\nmax_epochs = 2\nseed = 5\n")
        from srqh.ply import write_ply
        write_ply(synthetic.make_shape("wavy", 32, np.random.default_rng(1)), tmp_path / "in.ply")
        files = {}
        for run in ("a", "b"):
            base, rq, out = f"base_{run}.tnps", f"rq_{run}.tnps", f"out_{run}.spcc"
            _run(["train", "--config", str(cfg), "--output", base, "--log", f"log_{run}.csv"], tmp_path)
            _run(["train-rqulpe", "--config", str(cfg), "--models", base, "--output", rq,
                  "--log", f"rqlog_{run}.csv"], tmp_path)
            _run(["encode", "in.ply", out, "--chain", "4,2,F;3,1,F;3,1,F", "--models", base, "--rqulpe", rq],
                 tmp_path)
            files[run] = [(tmp_path / f).read_bytes() for f in (base, rq, out)]
        same = [x == y for x, y in zip(files["a"], files["b"])]
        report(9, all(same), f"two independent processes: base models {'identical' if same[0] else 'DIFFER'}, "
                             f"RQuLPE models {'identical' if same[1] else 'DIFFER'}, "
                             f"bitstreams {'identical' if same[2] else 'DIFFER'}")


# ----------------------------------------------------------------- 10: bench monotonicity
CHAIN_10 = "5,4,F;4,2,F;3,1,F;4,1,F"


class TestCriterion10:
    def test_bench_monotone(self, report, toy_settings, seq_models, rq_models):
        clouds = toy_settings.val_clouds()
        res = cli.bench(clouds, core.parse_chain(CHAIN_10), seq_models, rq_models, toy_settings.region, repeats=5)
        extra = res["t_dec_extra"]
        ok = all(b >= a for a, b in zip(extra, extra[1:]))
        report(10, ok, f"chain {CHAIN_10} on {len(clouds)} held-out clouds: t_dec_extra = " + ", ".join(f"{v:.1f}%" for v in extra)
               + f"; t_enc_extra = {res['t_enc_extra']:.1f}%")

