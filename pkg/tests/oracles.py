"""Independent scripted oracles shared by the unit and acceptance tests.

Written as plain per-pixel loops over Python floats so they share no code
path with the vectorised implementations they check.
"""

import math

import numpy as np


def soft_label_oracle(raters, template, bone, image, k=1.0, lam=0.5, n_raters=None):
    """The four soft-label rules applied pixel by pixel."""
    depth, h, w = image.shape
    if n_raters is None:
        n_raters = len({g.rater_id for grids in raters for g in grids})
    vol = [[[0.0] * w for _ in range(h)] for _ in range(depth)]
    for i in range(depth):
        # rule 1: fraction of raters selecting each cell, painted onto pixels
        for y in range(h):
            for x in range(w):
                r = (y - template.origin_y) // template.cell
                c = (x - template.origin_x) // template.cell
                if 0 <= r < template.rows and 0 <= c < template.cols:
                    votes = sum(int(g.selection[r][c]) for g in raters[i])
                    vol[i][y][x] = votes / n_raters
        # rule 2: nothing outside bone
        for y in range(h):
            for x in range(w):
                if bone[i, y, x] != 1:
                    vol[i][y][x] = 0.0
        # rule 3: selected pixels brighter than mean + k*std of bone become certain
        vals = [float(image[i, y, x]) for y in range(h) for x in range(w) if bone[i, y, x] == 1]
        if vals:
            mu = math.fsum(vals) / len(vals)
            sd = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))
            cut = mu + k * sd
            for y in range(h):
                for x in range(w):
                    if vol[i][y][x] > 0 and float(image[i, y, x]) > cut:
                        vol[i][y][x] = 1.0
    # rule 4: interior slices rise towards evidence in both neighbours, then re-mask
    out = [[row[:] for row in sl] for sl in vol]
    for i in range(1, depth - 1):
        for y in range(h):
            for x in range(w):
                both = min(vol[i - 1][y][x], vol[i + 1][y][x])
                out[i][y][x] = max(vol[i][y][x], lam * both)
    for i in range(depth):
        for y in range(h):
            for x in range(w):
                if bone[i, y, x] != 1:
                    out[i][y][x] = 0.0
    return np.array(out, dtype=np.float32)


def scripted_phantom(n_raters=3, depth=12, seed=5):
    """A small 3-rater phantom together with its rater grids and template."""
    from noisyseg.synthgen import PhantomSpec, RaterNoiseSpec, generate_volume, grid_template_for, simulate_raters

    vol = generate_volume(PhantomSpec(depth=depth, height=40, width=40, bone_axes=(14.0, 16.0),
                                      lesion_count=(3, 5), lesion_radius=(2.0, 4.0), seed=seed))
    template = grid_template_for(vol, 6)
    raters = simulate_raters(vol, template, RaterNoiseSpec(n_raters=n_raters, miss_rate=0.5, fp_rate=0.1, seed=seed))
    return vol, template, raters


def _components(mask):
    """8-connected components by breadth-first flood fill, in raster order of first pixel."""
    h, w = len(mask), len(mask[0])
    seen = [[False] * w for _ in range(h)]
    comps = []
    for y in range(h):
        for x in range(w):
            if mask[y][x] and not seen[y][x]:
                seen[y][x] = True
                queue, comp = [(y, x)], []
                while queue:
                    cy, cx = queue.pop(0)
                    comp.append((cy, cx))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny][nx] and not seen[ny][nx]:
                                seen[ny][nx] = True
                                queue.append((ny, nx))
                comps.append(set(comp))
    return comps


def metric_oracle(pred_volumes, gt_volumes, threshold=0.5):
    """Aggregate metrics of a corpus from first principles on Python sets."""
    images = []
    tp = fp = fn = 0
    for vid in sorted(gt_volumes):
        for prob, gt in zip(pred_volumes[vid], gt_volumes[vid]):
            prob = [[float(v) for v in row] for row in prob]
            fg = [[v >= threshold for v in row] for row in prob]
            g = [[int(v) == 1 for v in row] for row in gt]
            for y in range(len(g)):
                for x in range(len(g[0])):
                    tp += fg[y][x] and g[y][x]
                    fp += fg[y][x] and not g[y][x]
                    fn += g[y][x] and not fg[y][x]
            preds = [(sum(prob[y][x] for y, x in c) / len(c), c) for c in _components(fg)]
            images.append((preds, _components(g)))

    def iou(a, b):
        return len(a & b) / len(a | b)

    def ap(tau):
        ranked = sorted(((-conf, i, k) for i, (preds, _) in enumerate(images) for k, (conf, _) in enumerate(preds)))
        used = [set() for _ in images]
        hits = []
        for _, i, k in ranked:
            comp = images[i][0][k][1]
            best, best_j = -1.0, None
            for j, gcomp in enumerate(images[i][1]):
                if j not in used[i] and iou(comp, gcomp) > best:
                    best, best_j = iou(comp, gcomp), j
            if best_j is not None and best >= tau:
                used[i].add(best_j)
                hits.append(True)
            else:
                hits.append(False)
        n_gt = sum(len(gts) for _, gts in images)
        if n_gt == 0:
            return (1.0 if not hits else 0.0), 0, len(hits), 0
        # precision envelope evaluated at each recall step
        area, n_tp = 0.0, 0
        precisions = []
        for r, hit in enumerate(hits, start=1):
            n_tp += hit
            precisions.append((n_tp / n_gt, n_tp / r))
        prev_rec = 0.0
        for rec, _ in precisions:
            if rec > prev_rec:
                area += (rec - prev_rec) * max(p for r2, p in precisions if r2 >= rec)
                prev_rec = rec
        return area, sum(hits), len(hits), n_gt

    ap50, n_tp, n_pred, n_gt = ap(0.5)
    ap75 = ap(0.75)[0]
    best = [max((iou(p, g) for _, p in preds), default=0.0) for preds, gts in images for g in gts]
    denom = 2 * tp + fp + fn
    return {
        "ap50": ap50,
        "ap75": ap75,
        "iou": math.fsum(best) / len(best) if best else 1.0,
        "recall": n_tp / n_gt if n_gt else 0.0,
        "precision": n_tp / n_pred if n_pred else 0.0,
        "dice": 2 * tp / denom if denom else 1.0,
    }


def metric_fixture():
    """Two tiny volumes with hand-placed lesions and predictions.

    Volume a, slice 0: GT blob A (2x2) predicted exactly at 0.9; GT blob B
    (2x3) covered by a 2x2 prediction (IoU 4/6) at 0.8; a false positive
    pixel at 0.7.  Slice 1: a GT pixel missed.  Volume b: a diagonal GT pair
    predicted as a diagonal pair at 0.6 (8-connected, IoU 1) and an empty
    negative slice with one false-positive pair at 0.95.
    """
    import numpy as np

    a_pred = np.zeros((2, 8, 8))
    a_gt = np.zeros((2, 8, 8), np.uint8)
    a_gt[0, 0:2, 0:2] = 1
    a_pred[0, 0:2, 0:2] = 0.9
    a_gt[0, 4:6, 3:6] = 1
    a_pred[0, 4:6, 3:5] = 0.8
    a_pred[0, 7, 7] = 0.7
    a_gt[1, 3, 3] = 1
    a_pred[1, 3, 3] = 0.2
    b_pred = np.zeros((2, 6, 6))
    b_gt = np.zeros((2, 6, 6), np.uint8)
    b_gt[0, 1, 1] = b_gt[0, 2, 2] = 1
    b_pred[0, 1, 1] = b_pred[0, 2, 2] = 0.6
    b_pred[1, 4, 4:6] = 0.95
    return {"a": a_pred, "b": b_pred}, {"a": a_gt, "b": b_gt}
