"""Small plans and fixture manifests shared by the bench, CLI and acceptance tests."""

from noisyseg.bench import BASELINE, SOFT_BASELINE, TARGET, default_rows

# Method -> (AP50, AP75, IoU%, Rec., Prec., Dice) as printed in the reference table
REFERENCE_TABLE = {
    BASELINE: (12, 4, 31, 0.46, 0.52, 0.27),
    "APL binary (1,0,1)": (8, 3, 29, 0.43, 0.47, 0.21),
    "APL binary (2,0,1)": (8, 1, 27, 0.26, 0.40, 0.20),
    SOFT_BASELINE: (14, 11, 37, 0.63, 0.60, 0.28),
    "APL + soft lbl (0,1,1)": (19, 17, 35, 0.64, 0.64, 0.31),
    "APL + soft lbl (0,2,1)": (12, 10, 33, 0.54, 0.55, 0.36),
    TARGET: (20, 15, 38, 0.68, 0.66, 0.35),
    "APL + soft lbl (2,2,1)": (14, 10, 30, 0.50, 0.56, 0.30),
}


def reference_manifest() -> dict:
    rows = []
    for row in default_rows():
        ap50, ap75, iou, rec, prec, dice = REFERENCE_TABLE[row.name]
        median = {"ap50": ap50 / 100, "ap75": ap75 / 100, "iou": iou / 100,
                  "recall": rec, "precision": prec, "dice": dice}
        rows.append({**row.to_dict(), "median": median})
    return {"seeds": [0], "rows": rows}


def tiny_plan(rows=(BASELINE, SOFT_BASELINE), seeds=(0,), epochs=2) -> dict:
    """A plan that runs in seconds: 5 small volumes, few epochs."""
    chosen = [r.to_dict() for r in default_rows() if r.name in rows]
    return {
        "rows": chosen,
        "train": {"epochs": epochs, "batch_size": 4},
        "dataset": {
            "phantom": {"depth": 4, "height": 32, "width": 32, "bone_axes": [11.0, 13.0],
                        "lesion_count": [2, 4], "lesion_radius": [2.0, 4.0], "seed": 3},
            "noise": {"n_raters": 3, "seed": 5},
            "n_volumes": 5,
            "ratios": [0.6, 0.2, 0.2],
            "cell": 6,
        },
        "seeds": list(seeds),
    }
