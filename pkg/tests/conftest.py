import numpy as np
import pytest

from semiseg.data import SplitManifest, TileRecord, save_png
from semiseg.synthetic import SYNTHETIC_NOMENCLATURE, RegionStyle, make_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """3-class synthetic dataset: 4 labeled, 8 unlabeled and 4 test tiles of 64 px."""
    out = tmp_path_factory.mktemp("small")
    regions = [
        RegionStyle("Alpha", 4, "labeled_train"),
        RegionStyle("Beta", 8, "unlabeled_train", gain=(1.1, 0.9, 0.8)),
        RegionStyle("Gamma", 4, "test", gain=(1.05, 0.95, 0.85)),
    ]
    return make_dataset(out, regions, tile_px=64, seed=3)


def write_tiles(root, specs, nomenclature=SYNTHETIC_NOMENCLATURE, size=(40, 40), seed=0):
    """Write random rasters for (tile_id, region, split) triples; returns a manifest."""
    rng = np.random.default_rng(seed)
    records = []
    for tid, region, split in specs:
        img = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
        ip = root / f"{tid}.png"
        save_png(img, ip)
        lp = None
        if split != "unlabeled_train":
            lp = root / f"{tid}_gt.png"
            save_png(rng.integers(0, nomenclature.num_classes, size=size, dtype=np.uint8), lp)
        records.append(TileRecord(tid, str(ip), str(lp) if lp else None, region, split, size[1], size[0]))
    return SplitManifest(tuple(records), nomenclature)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
