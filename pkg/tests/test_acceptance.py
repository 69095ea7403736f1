"""Top-level acceptance gate.

Nine numbered criteria, one test each, covering the geometry oracle,
analytic-vs-numeric gradients, the ablation identity, episodic protocol
statistics, the layer-weight contract, two qualitative trend reproductions,
proxy-A-distance sanity, and determinism/persistence. Each test prints a
single `criterion N (<name>): PASS|FAIL` line on the real stdout so the
gate is readable straight off a captured pytest run.
"""

import json

import numpy as np
import pytest
import torch

from midfsl import geometry
from midfsl.data import ArrayDataset, SynthSpec, generate_synthetic, load_split
from midfsl.domaindist import compute_pad
from midfsl.episodic import (
    EvalSummary,
    evaluate,
    extract_features,
    feature_distant,
    read_results,
    write_results,
)
from midfsl.geometry import PrototypeBank
from midfsl.network import (
    BackboneConfig,
    MidLevelNet,
    abs_prototypes,
    safe_normalize,
)
from midfsl.objectives import (
    LossConfig,
    loss_cls,
    loss_mid,
    loss_recon,
    reconstruct,
    residual_target,
)
from midfsl.trainer import (
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    to_inputs,
    train_base,
    train_baseline,
)

from gradcheck import check_gradients

BB16 = BackboneConfig(block_widths=(4, 8, 12, 16), input_shape=(16, 16, 1),
                      tap_layers=(1, 2))
BB32 = BackboneConfig(block_widths=(8, 16, 24, 32), input_shape=(32, 32, 1),
                      tap_layers=(1, 2))


def announce(capsys, num, name, body):
    """Run one criterion body; print exactly one PASS/FAIL line for it."""
    try:
        body()
    except BaseException:
        with capsys.disabled():
            print(f"criterion {num} ({name}): FAIL")
        raise
    with capsys.disabled():
        print(f"criterion {num} ({name}): PASS")


def synth(tmp, name, style="texture", base=6, novel=6, per=20, size=16,
          noise=0.02, seed=0):
    spec = SynthSpec(num_base_classes=base, num_novel_classes=novel,
                     samples_per_class=per, image_size=size,
                     domain_style=style, noise=noise, seed=seed)
    return generate_synthetic(spec, tmp / name)


# ---------------------------------------------------------------------------
# 1. geometry oracle suite
# ---------------------------------------------------------------------------

def brute_force_reconstruct(f, rows, exclude, splits, neighbors):
    """Plain-loop reference: per split, rank candidates by cosine (ties to
    the lower index) and average the top picks."""
    d = f.shape[0]
    width = d // splits
    candidates = [i for i in range(rows.shape[0]) if i != exclude]
    recon = np.empty(d)
    indices = np.empty((splits, neighbors), dtype=int)
    for k in range(splits):
        lo, hi = k * width, (k + 1) * width
        sims = []
        for c in candidates:
            fu, pu = f[lo:hi], rows[c, lo:hi]
            nf, np_ = np.linalg.norm(fu), np.linalg.norm(pu)
            sims.append(0.0 if min(nf, np_) <= 1e-12
                        else float(np.dot(fu, pu) / (nf * np_)))
        ranked = sorted(range(len(candidates)), key=lambda i: (-sims[i], i))
        picks = [candidates[i] for i in ranked[:neighbors]]
        indices[k] = picks
        recon[lo:hi] = rows[picks, lo:hi].mean(axis=0)
    return recon, indices


def test_criterion_1_geometry_oracle(capsys):
    def body():
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            splits = int(rng.choice([1, 2, 4]))
            width = int(rng.integers(1, 64 // splits + 1))
            d = splits * width
            m = int(rng.integers(1, 4))
            n = int(rng.integers(m + 2, 21))
            rows = rng.uniform(0.05, 1.0, size=(n, d))
            f = rng.uniform(0.0, 1.0, size=d) + 0.01
            exclude = int(rng.integers(0, n)) if rng.random() < 0.5 else None

            got = geometry.split_reconstruct(
                f, PrototypeBank(rows=rows, class_ids=tuple(range(n))),
                exclude, splits, m,
            )
            want_recon, want_idx = brute_force_reconstruct(
                f, rows, exclude, splits, m,
            )
            np.testing.assert_array_equal(got.selected_indices, want_idx)
            np.testing.assert_allclose(got.reconstructed, want_recon,
                                       atol=1e-10)

            f_c = geometry.l2_normalize(f)
            r_c = geometry.l2_normalize(got.reconstructed)
            res = geometry.residual(f_c, r_c)
            raw = res.direction * res.length
            assert abs(float(np.dot(raw, r_c))) <= 1e-5
            l_rec = float(np.sum((f_c - r_c) ** 2))
            assert abs(res.cosine - (1.0 - l_rec / 2.0)) <= 1e-6
            assert abs(res.length - np.tan(np.arccos(res.cosine))) <= 1e-5

    announce(capsys, 1, "geometry oracle suite", body)


# ---------------------------------------------------------------------------
# 2. gradient checks on the toy model
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_checks(capsys):
    def body():
        torch.manual_seed(7)
        cfg = BackboneConfig(block_widths=(4, 6, 6, 8),
                             input_shape=(16, 16, 1), tap_layers=(1, 2))
        model = MidLevelNet(cfg, num_classes=5).double().eval()
        loss_cfg = LossConfig(splits=4, neighbors=2)
        rng = np.random.default_rng(7)
        x = torch.tensor(rng.uniform(0.0, 1.0, size=(6, 1, 16, 16)))
        labels = torch.tensor([0, 1, 2, 3, 4, 0])
        params = list(model.named_parameters())

        def cls_closure():
            feat, _ = model.forward_with_taps(x)
            return loss_cls(feat, labels, model.classifier.weight, loss_cfg)

        check_gradients(cls_closure, params)

        # The prototype selection inside the reconstruction is a detached,
        # piecewise-constant choice, so the implemented gradient is the
        # within-piece derivative. Finite differences must probe the same
        # piece: freeze the indices at the base point, after confirming the
        # frozen form matches the live loss there in value and in autograd
        # gradient (bit for bit).
        with torch.no_grad():
            feat0, _ = model.forward_with_taps(x)
            _, idx0 = reconstruct(feat0, model.classifier.weight, labels,
                                  loss_cfg.splits, loss_cfg.neighbors)
        split_ids = torch.arange(loss_cfg.splits).view(1, loss_cfg.splits, 1)

        def recon_closure():
            feat, _ = model.forward_with_taps(x)
            w_parts = abs_prototypes(model.classifier.weight).view(
                -1, loss_cfg.splits, feat.shape[1] // loss_cfg.splits)
            selected = w_parts.transpose(0, 1)[split_ids, idx0]
            recon = selected.mean(dim=2).reshape(feat.shape)
            f_c = safe_normalize(feat)
            r_c = safe_normalize(recon)
            return ((f_c - r_c) ** 2).sum(dim=-1).mean()

        def live_recon():
            feat, _ = model.forward_with_taps(x)
            return loss_recon(feat, labels, model.classifier.weight,
                              loss_cfg)[0]

        def grads_of(fn):
            model.zero_grad(set_to_none=True)
            fn().backward()
            return [None if p.grad is None else p.grad.detach().clone()
                    for _, p in params]

        with torch.no_grad():
            assert float(live_recon()) == float(recon_closure())
        for (name, _), live, frozen in zip(params, grads_of(live_recon),
                                           grads_of(recon_closure)):
            if live is None and frozen is None:
                continue
            assert live is not None and frozen is not None, name
            assert torch.equal(live, frozen), name
        model.zero_grad(set_to_none=True)

        check_gradients(recon_closure, params)

        with torch.no_grad():
            feat, _ = model.forward_with_taps(x)
            _, recon, _ = loss_recon(feat, labels, model.classifier.weight,
                                     loss_cfg)
            t_dir, t_len, degenerate, _ = residual_target(feat, recon)

        def mid_closure():
            _, mids = model.forward_with_taps(x)
            return loss_mid(t_dir, t_len, degenerate, mids, model.heads,
                            loss_cfg)

        check_gradients(mid_closure, params)

    announce(capsys, 2, "gradient checks", body)


# ---------------------------------------------------------------------------
# 3. ablation identity
# ---------------------------------------------------------------------------

def strip_wall_time(history):
    return [{k: v for k, v in rec.items() if k != "wall_time"}
            for rec in history]


def test_criterion_3_ablation_identity(tmp_path, capsys):
    def body():
        manifest = synth(tmp_path, "abl", novel=0, base=4, per=12, seed=3)
        base = load_split(manifest, "base", size=(16, 16))
        cfg = TrainConfig(
            loss=LossConfig(lambda1=0.0, lambda2=0.0, neighbors=1),
            backbone=BB16, epochs=6, batch_size=16, learning_rate=0.05,
            augment=True, seed=3,
        )
        ablated = train_base(cfg, base)
        baseline = train_baseline(cfg, base)
        assert strip_wall_time(ablated.history) == \
            strip_wall_time(baseline.history)
        for p_a, p_b in zip(ablated.model.parameters(),
                            baseline.model.parameters()):
            assert torch.equal(p_a, p_b)

    announce(capsys, 3, "ablation identity", body)


# ---------------------------------------------------------------------------
# 4. episodic protocol statistics
# ---------------------------------------------------------------------------

def labeled_dataset(num_classes, per_class, size=16):
    n = num_classes * per_class
    images = np.zeros((n, size, size, 1), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    names = tuple(f"c{i}" for i in range(num_classes))
    return ArrayDataset(images=images, labels=labels, class_names=names)


def test_criterion_4_episodic_statistics(tmp_path, capsys):
    def body():
        dataset = labeled_dataset(6, 21)

        onehot = evaluate(
            None, dataset, way=5, shot=1, queries=15, episodes=100,
            extractor=lambda images: np.eye(6)[dataset.labels],
        )
        assert f"{onehot.mean * 100:.2f} ± {onehot.ci95 * 100:.2f}" \
            == "100.00 ± 0.00"

        noise_rng = np.random.default_rng(11)
        noise = evaluate(
            None, dataset, way=5, shot=5, queries=15, episodes=600,
            extractor=lambda images: noise_rng.standard_normal(
                (len(images), 32)),
        )
        assert abs(noise.mean - 0.20) <= 0.02

        path = tmp_path / "results.jsonl"
        write_results(noise, path, {"mode": "noise"})
        stored = read_results(path)
        recomputed = EvalSummary.from_accuracies(stored["accuracies"])
        assert recomputed.mean == stored["summary"]["mean"]
        assert recomputed.ci95 == stored["summary"]["ci95"]

    announce(capsys, 4, "episodic protocol statistics", body)


# ---------------------------------------------------------------------------
# 5. layer-weight contract
# ---------------------------------------------------------------------------

def test_criterion_5_layer_weights(capsys):
    def body():
        torch.manual_seed(5)
        model = MidLevelNet(BB16, num_classes=6).eval()
        with torch.no_grad():  # move the gates off their uniform init
            for gate in list(model.heads.dir_gate) + list(model.heads.len_gate):
                gate.weight.normal_(0.0, 0.5)
                gate.bias.normal_(0.0, 0.5)
        x = torch.rand(1000, 1, 16, 16)
        with torch.no_grad():
            _, mids = model.forward_with_taps(x)
            a_dir = model.heads.direction_weights(mids)
            a_len = model.heads.length_weights(mids)
            f_a = feature_distant(x, model)
        for a in (a_dir, a_len):
            assert bool((a > 0).all())
            assert float((a.sum(dim=-1) - 1.0).abs().max()) <= 1e-6
        start = 0
        for l, d_l in enumerate(model.config.mid_dims):
            block = f_a[:, start:start + d_l]
            gap = (block.norm(dim=-1) - a_dir[:, l]).abs().max()
            assert float(gap) <= 1e-6
            start += d_l

    announce(capsys, 5, "layer-weight contract", body)


# ---------------------------------------------------------------------------
# 6. split-count trend
# ---------------------------------------------------------------------------

def converged_recon_loss(base, splits, seed):
    cfg = TrainConfig(
        loss=LossConfig(splits=splits), backbone=BB16, epochs=25,
        milestones=(15, 20), batch_size=16, learning_rate=0.05,
        augment=False, seed=seed,
    )
    state = train_base(cfg, base)
    return float(np.mean([rec["loss_recon"] for rec in state.history[-3:]]))


def test_criterion_6_split_count_trend(tmp_path, capsys):
    def body():
        for seed in range(3):
            manifest = synth(tmp_path, f"sc{seed}", novel=0, per=12,
                             seed=seed)
            base = load_split(manifest, "base", size=(16, 16))
            fine = converged_recon_loss(base, 4, seed)
            coarse = converged_recon_loss(base, 1, seed)
            assert fine < coarse, (
                f"seed {seed}: S=4 loss {fine:.4f} not below "
                f"S=1 loss {coarse:.4f}"
            )

    announce(capsys, 6, "split-count trend", body)


# ---------------------------------------------------------------------------
# 7. method-over-baseline trend
# ---------------------------------------------------------------------------

def test_criterion_7_method_over_baseline(tmp_path, capsys):
    def body():
        margins = []
        for seed in range(5):
            man_sk = synth(tmp_path, f"mb-sk{seed}", style="sketch",
                           seed=seed)
            man_tx = synth(tmp_path, f"mb-tx{seed}", style="texture",
                           seed=seed)
            base = load_split(man_sk, "base", size=(16, 16))
            cfg = TrainConfig(backbone=BB16, epochs=40, milestones=(20, 30),
                              augment=False, seed=seed)
            full = train_base(cfg, base)
            plain = train_baseline(cfg, base)
            sketch = load_split(man_sk, "novel", size=(16, 16))
            texture = load_split(man_tx, "novel", size=(16, 16))

            def acc(state, novel, mode):
                return evaluate(state, novel, way=5, shot=1, queries=15,
                                episodes=400, feature_mode=mode,
                                seed=seed).mean

            margins.append((
                acc(full, sketch, "near") - acc(plain, sketch, "final"),
                acc(full, texture, "distant") - acc(plain, texture, "final"),
                acc(full, texture, "distant") - acc(plain, texture,
                                                    "mid_concat"),
            ))
        mean = np.asarray(margins).mean(axis=0)
        labels = (
            "near-domain reconstruction feature vs baseline final feature",
            "distant-domain weighted mids vs baseline final feature",
            "distant-domain weighted mids vs baseline mid concatenation",
        )
        for value, label in zip(mean, labels):
            assert value > 0.0, (
                f"{label}: mean margin {value:+.4f} over 5 seeds "
                f"(per-seed {np.round(np.asarray(margins), 4).tolist()})"
            )

    announce(capsys, 7, "method-over-baseline trend", body)


# ---------------------------------------------------------------------------
# 8. proxy-A-distance sanity
# ---------------------------------------------------------------------------

def test_criterion_8_pad_sanity(tmp_path, capsys):
    def body():
        rng = np.random.default_rng(8)
        pool = rng.standard_normal((4000, 16))
        same = compute_pad(pool[:2000], pool[2000:], seed=0)
        assert same.pad <= 0.15

        far_a = rng.standard_normal((300, 16))
        far_b = rng.standard_normal((300, 16))
        far_b[:, 0] += 10.0
        far = compute_pad(far_a, far_b, seed=0)
        assert far.pad >= 1.9
        assert 0.0 <= same.pad <= 2.0 and 0.0 <= far.pad <= 2.0

        for seed in range(3):
            man_tx = synth(tmp_path, f"ptx{seed}", style="texture", novel=4,
                           per=30, size=32, noise=0.2, seed=seed)
            man_sk = synth(tmp_path, f"psk{seed}", style="sketch", novel=4,
                           per=30, size=32, noise=0.2, seed=seed)
            base = load_split(man_tx, "base", size=(32, 32))
            cfg = TrainConfig(loss=LossConfig(), backbone=BB32, epochs=6,
                              batch_size=16, learning_rate=0.05,
                              augment=False, seed=seed)
            state = train_base(cfg, base)
            feats_base = extract_features(state, base.images, "final")
            pad_of = {}
            for tag, man in (("texture", man_tx), ("sketch", man_sk)):
                novel = load_split(man, "novel", size=(32, 32))
                feats = extract_features(state, novel.images, "final")
                result = compute_pad(feats_base, feats, seed=seed)
                assert 0.0 <= result.pad <= 2.0
                pad_of[tag] = result.pad
            assert pad_of["texture"] > pad_of["sketch"], (
                f"seed {seed}: texture PAD {pad_of['texture']:.3f} not above "
                f"sketch PAD {pad_of['sketch']:.3f}"
            )

    announce(capsys, 8, "proxy-A-distance sanity", body)


# ---------------------------------------------------------------------------
# 9. determinism and persistence
# ---------------------------------------------------------------------------

def test_criterion_9_determinism_persistence(tmp_path, capsys):
    def body():
        manifest = synth(tmp_path, "det", base=5, novel=5, per=10, seed=9)
        base = load_split(manifest, "base", size=(16, 16))
        novel = load_split(manifest, "novel", size=(16, 16))
        cfg = TrainConfig(loss=LossConfig(neighbors=2), backbone=BB16,
                          epochs=4, batch_size=16, learning_rate=0.05,
                          augment=True, seed=9)

        runs = []
        for name in ("a", "b"):
            log = tmp_path / f"log_{name}.jsonl"
            state = train_base(cfg, base, log_path=log)
            summary = evaluate(state, novel, way=3, shot=2, queries=5,
                               episodes=40, feature_mode="near", seed=9)
            results = tmp_path / f"res_{name}.jsonl"
            write_results(summary, results, {"mode": "near"})
            runs.append((state, log, results))
        logs = [
            strip_wall_time([json.loads(s) for s in
                             log.read_text().splitlines()])
            for _, log, _ in runs
        ]
        assert logs[0] == logs[1]
        assert runs[0][2].read_bytes() == runs[1][2].read_bytes()

        state = runs[0][0]
        path = save_checkpoint(state, tmp_path / "ckpt.pt")
        restored = load_checkpoint(path)
        x = to_inputs(novel.images[:16], state.norm_mean, state.norm_std)
        with torch.no_grad():
            feat_a, mids_a = state.model.forward_with_taps(x)
            feat_b, mids_b = restored.model.forward_with_taps(x)
            logits_a = state.model.classifier(feat_a)
            logits_b = restored.model.classifier(feat_b)
        assert torch.equal(feat_a, feat_b)
        assert torch.equal(logits_a, logits_b)
        for m_a, m_b in zip(mids_a, mids_b):
            assert torch.equal(m_a, m_b)

    announce(capsys, 9, "determinism and persistence", body)
