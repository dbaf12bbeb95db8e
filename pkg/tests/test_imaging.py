import math

import numpy as np
import pytest
from scipy import stats

from plateaudit import imaging, learn, simulate
from plateaudit.core import SiteImage, derive_stream
from plateaudit.errors import ConfigError, DegenerateInputWarning, InputError
from plateaudit.imaging import (
    CellPatch,
    FocusModel,
    color_ramp,
    crop_patches,
    expected_rank_score,
    focus_features,
    focus_score,
    occlusion_saliency,
    otsu_threshold,
    plate_heatmap,
    segment_nuclei,
    train_focus_model,
)

AMPS = np.array([0.9, 0.65, 0.5, 0.4, 0.3])


def render(cells, h=64, w=64, seed=0, noise=0.02):
    img = simulate.render_cells(h, w, 5, cells, 0.05, noise,
                                derive_stream(seed, ["noise"]))
    return SiteImage(data=img.astype(np.float32))


# -------------------------------------------------------------- segmentation


def test_constant_image_segments_to_empty_with_warning():
    img = SiteImage(data=np.full((32, 32, 5), 0.25, dtype=np.float32))
    with pytest.warns(DegenerateInputWarning):
        assert segment_nuclei(img) == []


def test_single_spot_centroid_within_one_pixel():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=3)
    dets = segment_nuclei(img)
    assert len(dets) == 1
    assert math.hypot(dets[0].x - 32.0, dets[0].y - 32.0) < 1.0


def test_two_spots_twenty_pixels_apart():
    img = render([(22.0, 32.0, 3.0, AMPS), (42.0, 32.0, 3.0, AMPS)], seed=4)
    dets = segment_nuclei(img)
    assert len(dets) == 2


def test_detections_sorted_by_y_then_x():
    img = render([(40.0, 10.0, 2.5, AMPS), (10.0, 40.0, 2.5, AMPS),
                  (10.0, 10.0, 2.5, AMPS)], seed=5)
    dets = segment_nuclei(img)
    assert [(round(d.y / 10), round(d.x / 10)) for d in dets] == [(1, 1), (1, 4), (4, 1)]


def test_segmentation_recall_precision_on_separated_spots():
    # oracle: known render positions with >= 8 px separation, matched within 3 px
    stream = derive_stream(8, ["place"])
    hits = 0
    total_truth = 0
    total_pred = 0
    matched_pred = 0
    for rep in range(10):
        placed = []
        for _ in range(14):
            for _attempt in range(200):
                y, x = 4 + stream.uniform() * 56, 4 + stream.uniform() * 56
                if all((y - py) ** 2 + (x - px) ** 2 >= 64 for py, px in placed):
                    placed.append((y, x))
                    break
        img = render([(y, x, 2.0, AMPS) for y, x in placed], seed=100 + rep)
        dets = segment_nuclei(img)
        total_truth += len(placed)
        total_pred += len(dets)
        for y, x in placed:
            if any(math.hypot(d.y - y, d.x - x) <= 3.0 for d in dets):
                hits += 1
        for d in dets:
            if any(math.hypot(d.y - y, d.x - x) <= 3.0 for y, x in placed):
                matched_pred += 1
    assert hits / total_truth >= 0.9
    assert matched_pred / total_pred >= 0.9


def test_min_area_filters_components():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=6)
    assert segment_nuclei(img, min_area=10**6) == []


# -------------------------------------------------------------- patches


def test_center_patch_equals_central_subarray():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=7)
    det = segment_nuclei(img)[0]
    patch = crop_patches(img, [det], size=48)[0]
    iy, ix = int(round(det.y)), int(round(det.x))
    expected = img.data[iy - 24 : iy + 24, ix - 24 : ix + 24, :]
    assert not patch.padded
    assert patch.data.tobytes() == expected.tobytes()


def test_border_patch_padded_and_flagged():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=8)
    det = imaging.NucleusDetection(x=1.0, y=1.0, area_px=9, mean_intensity=0.5)
    patch = crop_patches(img, [det], size=48)[0]
    assert patch.padded
    assert patch.data.shape == (48, 48, 5)


def test_patch_cardinality_and_errors():
    img = render([(y, x, 2.5, AMPS) for y in (10, 25, 40) for x in (12, 30, 48)]
                 + [(55.0, j * 7 + 4.0, 2.5, AMPS) for j in range(8)], seed=9)
    dets = segment_nuclei(img)
    assert len(crop_patches(img, dets, size=16)) == len(dets)
    with pytest.raises(ConfigError):
        crop_patches(img, dets, size=15)
    with pytest.raises(ConfigError):
        crop_patches(img, dets, size=128)


# -------------------------------------------------------------- focus


def test_two_level_focus_model_separates_easily(sharp_patches):
    train, held = sharp_patches[:60], sharp_patches[60:90]
    fm = train_focus_model(train, [0.0, 4.0], seed=2)
    correct = 0
    total = 0
    for p in held:
        for k, sigma in enumerate(fm.levels):
            x = simulate.gaussian_blur(p.mean(axis=2).astype(np.float64), sigma)
            pred = learn.predict_labels(fm.model, focus_features(x)[None, :])[0]
            correct += pred == k
            total += 1
    assert correct / total >= 0.95


def test_duplicate_blur_level_rejected(sharp_patches):
    with pytest.raises(ConfigError):
        train_focus_model(sharp_patches[:60], [0.0, 2.0, 2.0], seed=0)
    with pytest.raises(ConfigError):
        train_focus_model(sharp_patches[:60], [2.0, 1.0], seed=0)


def test_too_few_patches_rejected(sharp_patches):
    with pytest.raises(InputError):
        train_focus_model(sharp_patches[:10], [0.0, 2.0], seed=0)


def test_permuted_label_training_is_chance_level(sharp_patches):
    # averaged over permutation seeds the held-out accuracy is chance exactly
    levels = [0.0, 2.0]
    rows, labels = [], []
    for p in sharp_patches[:60]:
        for k, sigma in enumerate(levels):
            rows.append(focus_features(
                simulate.gaussian_blur(p.mean(axis=2).astype(np.float64), sigma)))
            labels.append(k)
    X = np.vstack(rows)
    held_rows, held_labels = [], []
    for p in sharp_patches[60:90]:
        for k, sigma in enumerate(levels):
            held_rows.append(focus_features(
                simulate.gaussian_blur(p.mean(axis=2).astype(np.float64), sigma)))
            held_labels.append(k)
    held_X = np.vstack(held_rows)
    accs = []
    for rep in range(30):
        perm = derive_stream(13, ["labels", rep]).permutation(len(labels))
        shuffled = [labels[i] for i in perm]
        model = learn.train_logistic(X, shuffled, l2=1e-2)
        accs.append(learn.accuracy(learn.predict_labels(model, held_X), held_labels))
    assert abs(np.mean(accs) - 1.0 / len(levels)) <= 0.1


def test_expected_rank_score_formula():
    assert expected_rank_score(np.array([1.0, 0.0, 0.0, 0.0])) == 1.0
    assert expected_rank_score(np.array([0.0, 0.0, 0.0, 1.0])) == 0.0
    for nlevels in (2, 3, 5):
        assert expected_rank_score(np.full(nlevels, 1.0 / nlevels)) == pytest.approx(0.5)


def test_focus_score_monotone_in_blur(focus_model, sharp_patches):
    patch = sharp_patches[92].mean(axis=2).astype(np.float64)
    sigmas = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0]
    scores = [focus_score(focus_model, simulate.gaussian_blur(patch, s)) for s in sigmas]
    rho = stats.spearmanr(sigmas, scores).statistic
    assert rho <= -0.95
    assert scores[-1] <= scores[0]


def test_focus_score_degenerate_input(focus_model):
    flat = np.full((48, 48), 0.3)
    with pytest.warns(DegenerateInputWarning):
        assert focus_score(focus_model, flat) == 0.0


def test_focus_model_json_roundtrip(tmp_path, focus_model):
    path = tmp_path / "focus.json"
    focus_model.save(path)
    back = FocusModel.load(path)
    assert back.levels == focus_model.levels
    feats = focus_features(np.linspace(0, 1, 48 * 48).reshape(48, 48))[None, :]
    assert np.allclose(learn.predict_proba(back.model, feats),
                       learn.predict_proba(focus_model.model, feats))


# -------------------------------------------------------------- heatmap


def test_heatmap_single_color_when_constant():
    values = {(r, c, s): 0.7 for r in range(8) for c in range(12) for s in range(4)}
    svg = plate_heatmap(values, 4)
    fills = {part.split('"')[0] for part in svg.split('fill="')[1:]}
    fills -= {"#ffffff"}  # background
    cell_fills = {f for f in fills if f.startswith("#")}
    # value cells all share one color; the rest are the 10 legend swatches
    assert color_ramp(0.5) in cell_fills


def test_heatmap_ramp_orientation_center_distance():
    from plateaudit.core import WellAddress
    values = {(r, c, 0): WellAddress(r, c).center_distance()
              for r in range(8) for c in range(12)}
    svg = plate_heatmap(values, 1)
    # corner wells carry the max-end ramp color, the center well the min end
    assert color_ramp(1.0) in svg
    vmin = min(values.values())
    vmax = max(values.values())
    t_center = (WellAddress(3, 5).center_distance() - vmin) / (vmax - vmin)
    assert color_ramp(t_center) in svg


def test_heatmap_deterministic_bytes():
    values = {(r, c, s): (r * 12 + c + s) / 100 for r in range(8) for c in range(12)
              for s in range(2)}
    assert plate_heatmap(values, 2) == plate_heatmap(values, 2)


def test_heatmap_rejects_nonfinite_and_bad_keys():
    with pytest.raises(InputError, match="3"):
        plate_heatmap({(3, 5, 0): float("nan")}, 1)
    with pytest.raises(InputError):
        plate_heatmap({(9, 5, 0): 1.0}, 1)
    with pytest.raises(InputError):
        plate_heatmap({(3, 5, 4): 1.0}, 4)


def test_heatmap_focus_gradient_center_bright(sim_focus, focus_model):
    from plateaudit.storage import read_image
    _cfg, out, manifest, _truth = sim_focus
    values = {}
    for entry in manifest.sites:
        img = read_image(out / entry.image_path)
        values[(entry.key.row, entry.key.col, entry.key.site_index)] = \
            focus_score(focus_model, img)
    svg = plate_heatmap(values, 1, title="focus")
    assert svg.startswith("<svg")
    center = np.mean([values[(r, c, 0)] for r, c in ((3, 5), (3, 6), (4, 5), (4, 6))])
    corner = np.mean([values[(r, c, 0)] for r, c in ((0, 0), (0, 11), (7, 0), (7, 11))])
    assert center - corner >= 0.2


# -------------------------------------------------------------- occlusion


def test_occlusion_constant_model_zero_grid():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=10)
    grid = occlusion_saliency(lambda im: 1.25, img, window=16, stride=16)
    assert grid.shape == (4, 4)
    assert (grid == 0).all()


def test_occlusion_whole_image_window_identity():
    img = render([(32.0, 32.0, 3.0, AMPS)], seed=11)

    def total(im):
        return float(im.data.sum())

    grid = occlusion_saliency(total, img, window=64, stride=64, fill=0.0)
    assert grid.shape == (1, 1)
    filled = SiteImage(data=np.zeros_like(img.data))
    assert grid[0, 0] == pytest.approx(total(img) - total(filled))


def test_occlusion_count_model_logit_step():
    # oracle: direct model evaluation on the manually occluded image
    img = render([(8.0, 8.0, 2.5, AMPS), (48.0, 48.0, 2.5, AMPS)], seed=12,
                 noise=0.0)
    a, b = 0.9, -1.2

    def count_model(im):
        dets = [d for d in segment_nuclei(im) if d.mean_intensity > 0.2]
        return 1.0 / (1.0 + math.exp(-(a * len(dets) + b)))

    grid = occlusion_saliency(count_model, img, window=16, stride=16, fill=0.05)
    occluded = img.data.copy()
    occluded[0:16, 0:16, :] = np.float32(0.05)
    direct = count_model(img) - count_model(SiteImage(data=occluded))
    assert grid[0, 0] == pytest.approx(direct)
    expected_step = (1 / (1 + math.exp(-(a * 2 + b)))) - (1 / (1 + math.exp(-(a * 1 + b))))
    assert abs(grid[0, 0]) == pytest.approx(expected_step, abs=1e-9)


def test_occlusion_background_window_is_neutral():
    img = render([(8.0, 8.0, 2.5, AMPS)], seed=13, noise=0.0)

    def count_model(im):
        return float(len([d for d in segment_nuclei(im) if d.mean_intensity > 0.2]))

    grid = occlusion_saliency(count_model, img, window=16, stride=16, fill=0.05)
    assert grid[2, 2] == 0.0  # empty region: occlusion changes nothing
    assert grid[0, 0] == 1.0  # the window holding the one cell
