"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line to the terminal
(even under output capture) before asserting.
"""

import math
import time

import numpy as np
import pytest

import oracles
from rotoseg import metrics as M
from rotoseg.cli import main
from rotoseg.gradcheck import run_suite
from rotoseg.inference import plan_windows, sliding_window_predict
from rotoseg.io import (Volume, checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, read_volume,
                        volume_from_bytes, volume_to_bytes)
from rotoseg.model import (ModelConfig, SegmentationModel, drop_path, forward_mim, forward_seg, init_params,
                           patch_embed, self_attention)
from rotoseg.objectives import make_mask_plan, mim_loss, soft_dice_loss, voxel_mask
from rotoseg.preprocess import normalize_zscore
from rotoseg.rope3d import apply_rope, build_rope_table
from rotoseg.tensor import Tensor, layer_norm, no_grad
from rotoseg.trainer import load_model, stage_streams

DESK_MODEL = """
model.embed_dim = 96
model.depth = 2
model.heads = 4
num_classes = 4
"""
MIM_STAGE = DESK_MODEL + """
epochs = 1
steps_per_epoch = 200
lr = 0.001
seed = 0
"""
OVERFIT_STAGE = DESK_MODEL + """
epochs = 1
steps_per_epoch = 500
lr = 0.01
seed = 0
"""


@pytest.fixture()
def verdict(capsys):
    def report(number: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
        assert ok, detail
    return report


# -- 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    results = run_suite(seeds=10, end_to_end_seeds=2)
    elapsed = time.perf_counter() - start
    per_case = {}
    for r in results:
        per_case.setdefault(r.name, []).append(r)
    seeds_ok = all(len(v) >= 10 for k, v in per_case.items() if k != "end_to_end")
    failed = [r for r in results if not r.passed]
    worst = max((r.error for r in results if r.name != "end_to_end"), default=0.0)
    ok = not failed and seeds_ok and "encoder_block" in per_case and elapsed < 120
    verdict(1, "gradient suite", ok,
            f"{len(results) - len(failed)}/{len(results)} checks over {len(per_case)} cases, "
            f"worst op/block rel err {worst:.2e} (< 1e-4), {elapsed:.1f} s")


# -- 2 ---------------------------------------------------------------------------


def test_criterion_2_rope_invariants(verdict):
    grid = (6, 40, 40)
    table = build_rope_table(24, max_extent_zyx=grid)
    worst_shift = worst_norm = worst_inverse = 0.0
    for seed in range(25):
        rng = np.random.default_rng(seed)
        q = rng.standard_normal((1, 1, 24)).astype(np.float32)
        k = rng.standard_normal((1, 1, 24)).astype(np.float32)
        m = np.array([rng.integers(0, g // 2) for g in grid])
        n = np.array([rng.integers(0, g // 2) for g in grid])
        delta = np.array([rng.integers(0, g // 2) for g in grid])

        def logit(cq, ck):
            qr = apply_rope(Tensor(q), cq[None], table).data[0, 0].astype(np.float64)
            kr = apply_rope(Tensor(k), ck[None], table).data[0, 0].astype(np.float64)
            return float(qr @ kr)

        worst_shift = max(worst_shift, abs(logit(m, n) - logit(m + delta, n + delta)))

        x = rng.standard_normal((4, 128, 24)).astype(np.float32)
        coords = np.stack([rng.integers(0, g, 128) for g in grid], axis=1)
        rot = apply_rope(Tensor(x), coords, table)
        n_in = np.linalg.norm(x.astype(np.float64), axis=-1)
        n_out = np.linalg.norm(rot.data.astype(np.float64), axis=-1)
        worst_norm = max(worst_norm, float(np.max(np.abs(n_out - n_in) / n_in)))
        back = apply_rope(rot, coords, table, inverse=True).data
        worst_inverse = max(worst_inverse, float(np.max(np.abs(back - x) / np.maximum(np.abs(x), 1.0))))
    ok = worst_shift < 1e-5 and worst_norm < 1e-6 and worst_inverse < 1e-6
    verdict(2, "RoPE invariants", ok,
            f"25 triples: logit shift err {worst_shift:.1e} (< 1e-5), norm rel err {worst_norm:.1e} (< 1e-6), "
            f"inverse err {worst_inverse:.1e} (< 1e-6)")


# -- 3 ---------------------------------------------------------------------------


def _pair_mismatches(p, r, sp, oracle_surf, oracle_centroid=None):
    bad = []
    if M.dice(p, r) != oracles.dice(p, r):
        bad.append("dice")
    if M.vol_diff_cc(p, r, sp) != oracles.vol_diff(p, r, sp):
        bad.append("voldiff")
    c = M.centroid_dist_mm(p, r, sp)
    co = oracles.centroid_dist(p, r, sp) if oracle_centroid is None else oracle_centroid
    if c != co:
        bad.append("centroid")
    s = M.surf_dist_mm(p, r, sp)
    if (s is None) != (oracle_surf is None) or (s is not None and abs(s - oracle_surf) > 1e-9):
        bad.append("surfdist")
    return bad


def test_criterion_3_metric_oracles(verdict):
    start = time.perf_counter()
    sp = (1.5, 0.5, 2.0)
    masks = list(oracles.all_masks_2cube())
    # brute-force boundary coordinates per mask, reused across all pairs
    bounds = [np.array(oracles.boundary_voxels(m), dtype=np.float64).reshape(-1, 3) * sp for m in masks]
    mismatches = 0
    for i, p in enumerate(masks):
        for j, r in enumerate(masks):
            if len(bounds[i]) and len(bounds[j]):
                d = np.sqrt(((bounds[i][:, None] - bounds[j][None]) ** 2).sum(-1))
                surf = (float(d.min(1).mean()) + float(d.min(0).mean())) / 2.0
            else:
                surf = None
            mismatches += bool(_pair_mismatches(p, r, sp, surf))
    exhaustive = len(masks) ** 2
    rng = np.random.default_rng(0)
    for _ in range(100):
        spacing = tuple(float(s) for s in rng.uniform(0.3, 3.0, 3))
        p = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.95)
        r = rng.random((8, 8, 8)) < rng.uniform(0.05, 0.95)
        mismatches += bool(_pair_mismatches(p, r, spacing, oracles.surf_dist_pairwise(p, r, spacing)))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    verdict(3, "metric oracle equivalence", ok,
            f"{exhaustive} exhaustive 2^3 pairs + 100 random 8^3 pairs, {mismatches} mismatches, {elapsed:.1f} s")


# -- 4 ---------------------------------------------------------------------------


def test_criterion_4_full_size_shape_contract(verdict):
    cfg = ModelConfig(embed_dim=48, depth=1, heads=4, num_classes=2)
    params = init_params(cfg, np.random.default_rng(0))
    vol = np.random.default_rng(1).standard_normal((1, 48, 320, 320)).astype(np.float32)
    start = time.perf_counter()
    with no_grad():
        grid = patch_embed(vol, params, cfg)
        logits = forward_seg(vol, params, cfg)
    elapsed = time.perf_counter() - start
    ok = (grid.tokens.shape[0] == 9600 and grid.grid_extents == (6, 40, 40)
          and logits.shape == (2, 48, 320, 320) and bool(np.isfinite(logits.data).all()) and elapsed < 120)
    verdict(4, "48x320x320 shape contract", ok,
            f"{grid.tokens.shape[0]} tokens on grid {grid.grid_extents}, logits {logits.shape}, {elapsed:.1f} s")


# -- 5 and 6 share one pretraining run ----------------------------------------------


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    root = tmp_path_factory.mktemp("staged")
    (root / "mim.cfg").write_text(MIM_STAGE)
    (root / "seg.cfg").write_text(OVERFIT_STAGE)
    assert main(["phantom", "--out-dir", str(root), "--cases", "2"]) == 0
    images = [str(root / f"case{i:03d}_image.rvl") for i in range(2)]
    start = time.perf_counter()
    code = main(["pretrain", "--config", str(root / "mim.cfg"), "--images", *images, "--out", str(root / "mim.rck")])
    return {"root": root, "images": images, "code": code, "mim_seconds": time.perf_counter() - start}


def _mim_eval_loss(params, cfg, images, n_masks=8):
    losses = []
    with no_grad():
        for img in images:
            n_tokens = int(np.prod([e // p for e, p in zip(img.shape[1:], cfg.patch_size)]))
            for s in range(n_masks):
                plan = make_mask_plan(n_tokens, 0.6, seed=1000 + s)
                recon = forward_mim(img, plan.mask, params, cfg)
                losses.append(mim_loss(recon, img, plan, cfg.patch_size).item())
    return float(np.mean(losses))


def test_criterion_5_mim_stage(staged, verdict):
    assert staged["code"] == 0
    params, cfg, meta = load_model(staged["root"] / "mim.rck")
    images = [normalize_zscore(read_volume(p)).channel_first() for p in staged["images"]]
    init = init_params(cfg, stage_streams(0)["init"])
    before = _mim_eval_loss(init, cfg, images)
    after = _mim_eval_loss(params, cfg, images)
    ratio = after / before

    # targets outside masked patches never reach the loss or its gradients
    img = images[0]
    plan = make_mask_plan(64, 0.6, seed=7)
    keep = ~voxel_mask(plan, img.shape[1:], cfg.patch_size)
    perturbed = img.copy()
    perturbed[0][keep] += np.random.default_rng(0).standard_normal(int(keep.sum())).astype(np.float32) * 10
    runs = []
    for target in (img, perturbed):
        for p in params.values():
            p.grad = None
        loss = mim_loss(forward_mim(img, plan.mask, params, cfg), target, plan, cfg.patch_size)
        loss.backward()
        runs.append((loss.item(), {n: p.grad.copy() for n, p in params.items() if p.grad is not None}))
    same = runs[0][0] == runs[1][0] and runs[0][1].keys() == runs[1][1].keys() and all(
        np.array_equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])
    ok = ratio < 0.5 and same and meta["step_count"] == "200" and staged["mim_seconds"] < 300
    verdict(5, "MIM pretraining", ok,
            f"held-mask recon loss {before:.4f} -> {after:.4f} (ratio {ratio:.3f} < 0.5) after "
            f"{meta['step_count']} steps in {staged['mim_seconds']:.0f} s; unmasked-target perturbation "
            f"{'leaves' if same else 'CHANGES'} loss and {len(runs[0][1])} gradients")


def test_criterion_6_transfer_and_overfit(staged, verdict):
    assert staged["code"] == 0
    root = staged["root"]
    image, labels = staged["images"][0], str(root / "case000_labels.rvl")
    start = time.perf_counter()
    code = main(["finetune", "--config", str(root / "seg.cfg"), "--images", image, "--labels", labels,
                 "--transfer-from", str(root / "mim.rck"), "--transfer-policy", "encoder_only",
                 "--transfer-report", str(root / "transfer.tsv"), "--out", str(root / "seg.rck")])
    assert code == 0
    assert main(["infer", "--model", str(root / "seg.rck"), "--image", image, "--out", str(root / "pred.rvl"),
                 "--logits", str(root / "logits.rvl")]) == 0
    assert main(["evaluate", "--pred", str(root / "pred.rvl"), "--ref", labels, "--num-classes", "4",
                 "--tsv", str(root / "eval.tsv")]) == 0
    elapsed = time.perf_counter() - start

    rows = [line.split("\t") for line in (root / "eval.tsv").read_text().splitlines()]
    hard = float(rows[-1][1].split(" ± ")[0])
    logits = read_volume(root / "logits.rvl").array
    lab = read_volume(labels).array
    soft = 1.0 - soft_dice_loss(Tensor(logits, dtype=np.float64), lab).item()

    report = dict(line.split("\t")[::-1] for line in (root / "transfer.tsv").read_text().splitlines())
    src, _ = read_checkpoint(root / "mim.rck")
    seg, _ = read_checkpoint(root / "seg.rck")
    enc = [n for n in report if n.startswith("enc.")]
    other = [n for n in report if not n.startswith("enc.")]
    transfer_ok = all(report[n] == "copied" for n in enc) and all(report[n] == "reinitialized" for n in other)
    # mask token is frozen during segmentation, so it must still match the source bit for bit
    frozen_ok = seg["enc.mask_token"].tobytes() == src["enc.mask_token"].tobytes()
    ok = hard >= 0.90 and soft >= 0.90 and transfer_ok and frozen_ok and len(enc) > 0 and elapsed < 900
    verdict(6, "staged transfer + overfit", ok,
            f"{len(enc)} enc. copied, {len(other)} dec./head. reinitialized; foreground Dice {hard:.4f}, "
            f"soft Dice {soft:.4f} (>= 0.90) after 500 steps, {elapsed:.0f} s")


def test_criterion_6_transfer_is_bit_exact(staged, tmp_path):
    # the copy itself, checked before any fine-tuning step touches the encoder
    root = staged["root"]
    out = tmp_path / "zero.rck"
    (tmp_path / "zero.cfg").write_text(DESK_MODEL + "epochs = 0\n")
    assert main(["finetune", "--config", str(tmp_path / "zero.cfg"), "--images", staged["images"][0],
                 "--labels", str(root / "case000_labels.rvl"), "--transfer-from", str(root / "mim.rck"),
                 "--transfer-policy", "encoder_only", "--transfer-report", str(tmp_path / "t.tsv"),
                 "--out", str(out)]) == 0
    src, _ = read_checkpoint(root / "mim.rck")
    dst, meta = read_checkpoint(out)
    _, cfg, _ = load_model(out)
    fresh = init_params(cfg, stage_streams(int(meta["seed"]))["init"])
    assert any(n.startswith("enc.") for n in dst) and any(not n.startswith("enc.") for n in dst)
    for n in dst:
        expected = src[n] if n.startswith("enc.") else fresh[n].data
        assert dst[n].tobytes() == expected.tobytes(), n


# -- 7 ---------------------------------------------------------------------------


def test_criterion_7_sliding_window(verdict):
    values = np.array([1.5, -0.25, 7.0, 1e-3], np.float32)

    def constant(window):
        return np.broadcast_to(values[:, None, None, None], (4,) + window.shape[1:]).copy()

    def pointwise(window):
        return np.concatenate([np.tanh(window) * 3.0, window ** 2 - 1.0], axis=0).astype(np.float32)

    const_ok = True
    for overlap in (0.0, 0.25, 0.5, 0.75):
        for blend in ("gaussian", "uniform"):
            out = sliding_window_predict(np.zeros((1, 27, 40, 19), np.float32), constant,
                                         plan_windows((27, 40, 19), (16, 16, 8), overlap, blend))
            const_ok &= all(np.all(out[c] == values[c]) for c in range(4))

    cfg = ModelConfig(embed_dim=24, depth=1, heads=2, num_classes=3)
    params = init_params(cfg, np.random.default_rng(3))
    vol = np.random.default_rng(4).standard_normal((1, 16, 24, 16)).astype(np.float32)
    single = sliding_window_predict(vol, SegmentationModel(params, cfg),
                                    plan_windows((16, 24, 16), (16, 24, 16), 0.5, "uniform"))
    with no_grad():
        direct = forward_seg(vol, params, cfg).data
    single_ok = single.tobytes() == direct.tobytes()

    big = np.random.default_rng(5).standard_normal((1, 30, 26, 21)).astype(np.float32)
    ref = pointwise(big)
    worst = 0.0
    for overlap in (0.0, 0.3, 0.5, 0.8):
        for blend in ("gaussian", "uniform"):
            out = sliding_window_predict(big, pointwise, plan_windows(big.shape[1:], (8, 8, 8), overlap, blend))
            worst = max(worst, float(np.max(np.abs(out - ref))))
    ok = const_ok and single_ok and worst < 1e-5
    verdict(7, "sliding-window consistency", ok,
            f"constant stub exact: {const_ok}; single window bit-exact: {single_ok}; "
            f"overlap invariance err {worst:.1e} (< 1e-5)")


# -- 8 ---------------------------------------------------------------------------


TINY_STAGE = """
model.embed_dim = 12
model.depth = 1
model.heads = 2
num_classes = 3
batch_size = 2
epochs = 1
steps_per_epoch = 3
seed = 11
"""


def _cli_run(root):
    root.mkdir()
    (root / "spec.cfg").write_text("extents = 16,16,16\norgans = 2\nseed = 9\n")
    (root / "stage.cfg").write_text(TINY_STAGE)
    img, lab = str(root / "case000_image.rvl"), str(root / "case000_labels.rvl")
    codes = [
        main(["phantom", "--spec", str(root / "spec.cfg"), "--out-dir", str(root)]),
        main(["pretrain", "--config", str(root / "stage.cfg"), "--images", img, "--out", str(root / "a.rck")]),
        main(["finetune", "--config", str(root / "stage.cfg"), "--images", img, "--labels", lab,
              "--transfer-from", str(root / "a.rck"), "--transfer-policy", "encoder_only",
              "--transfer-report", str(root / "t.tsv"), "--out", str(root / "b.rck")]),
        main(["infer", "--model", str(root / "b.rck"), "--image", img, "--out", str(root / "pred.rvl"),
              "--window", "16,8,8"]),
    ]
    files = ["case000_image.rvl", "case000_labels.rvl", "a.rck", "b.rck", "pred.rvl"]
    return codes, {f: (root / f).read_bytes() for f in files}


def test_criterion_8_determinism_and_formats(tmp_path, verdict):
    codes1, run1 = _cli_run(tmp_path / "one")
    codes2, run2 = _cli_run(tmp_path / "two")
    deterministic = codes1 == codes2 == [0, 0, 0, 0] and run1 == run2

    rng = np.random.default_rng(0)
    f32 = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    u16 = rng.integers(0, 65536, (5, 3, 7)).astype(np.uint16)
    trips = [volume_from_bytes(volume_to_bytes(Volume(a, (1.9, 0.5, 0.5)))).array.tobytes() == a.tobytes()
             for a in (f32, u16)]
    tensors, meta = checkpoint_from_bytes(run1["b.rck"])
    trips.append(checkpoint_to_bytes(tensors, meta) == run1["b.rck"])
    round_trip = all(trips)

    root = tmp_path / "one"
    good = run1["case000_labels.rvl"]
    corruptions = {
        "magic": b"RVL0" + good[4:],
        "dtype": good.replace(b"dtype=u16", b"dtype=u32", 1),
        "dims": good.replace(b"dims=16,16,16", b"dims=16,16,17", 1),
        "truncated": good[:-2],
        "header": good.replace(b"spacing=", b"spacinq=", 1),
    }
    exit_codes = {}
    for name, data in corruptions.items():
        bad = root / f"bad_{name}.rvl"
        bad.write_bytes(data)
        exit_codes[name] = main(["evaluate", "--pred", str(bad), "--ref", str(root / "case000_labels.rvl"),
                                 "--num-classes", "3"])
    bad_ck = root / "bad.rck"
    bad_ck.write_bytes(run1["b.rck"][:200])
    exit_codes["checkpoint"] = main(["infer", "--model", str(bad_ck), "--image", str(root / "case000_image.rvl"),
                                     "--out", str(root / "p.rvl")])
    rejected = all(c == 2 for c in exit_codes.values())
    ok = deterministic and round_trip and rejected
    verdict(8, "determinism and formats", ok,
            f"two seeded CLI runs bit-identical: {deterministic} ({len(run1)} files); round trips exact: "
            f"{round_trip}; corrupted inputs exit codes {sorted(set(exit_codes.values()))} over {len(exit_codes)} cases")


# -- 9 ---------------------------------------------------------------------------


def test_criterion_9_droppath_layerscale(verdict):
    cfg = ModelConfig()
    params = init_params(cfg, np.random.default_rng(0))
    ls = [n for n in params if n.endswith((".ls1", ".ls2"))]
    ls_ok = len(ls) == 2 * cfg.depth and all(np.all(params[n].data == np.float32(0.1)) for n in ls)
    defaults_ok = cfg.droppath_rate == 0.2 and cfg.layerscale_init == 0.1

    # the attention branch of block 0 on a real token grid, as the block would see it
    vol = np.random.default_rng(1).standard_normal((1, 16, 16, 16)).astype(np.float32)
    table = build_rope_table(cfg.head_dim, cfg.rope_base, (2, 2, 2))
    draws = 10_000
    rng = np.random.default_rng(2)
    with no_grad():
        grid = patch_embed(vol, params, cfg)
        h = layer_norm(grid.tokens, params["enc.block0.norm1.weight"], params["enc.block0.norm1.bias"])
        branch = self_attention(h, grid.lattice, params, "enc.block0.attn", cfg, table) * params["enc.block0.ls1"]
        eval_out = drop_path(branch, cfg.droppath_rate, False, None).data.astype(np.float64)
        acc = np.zeros_like(eval_out)
        for _ in range(draws):
            acc += drop_path(branch, cfg.droppath_rate, True, rng).data
    rel = float(np.linalg.norm(acc / draws - eval_out) / np.linalg.norm(eval_out))
    ok = ls_ok and defaults_ok and rel < 0.02
    verdict(9, "DropPath / LayerScale semantics", ok,
            f"{len(ls)} LayerScale tensors == 0.1: {ls_ok}; droppath default {cfg.droppath_rate}; "
            f"Monte-Carlo mean over {draws} draws rel err {rel:.4f} (< 0.02)")
