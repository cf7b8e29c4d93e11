import numpy as np
import pytest
from PIL import Image

from textcam.backbone import MockBackbone
from textcam.maskgen import save_mask

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid or "::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::test_criterion_")[1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"[{_CRITERIA[name]}] criterion {int(num):>2}: {label.replace('_', ' ')}")


@pytest.fixture
def mock():
    return MockBackbone(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=64, w=64):
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


SYNTHETIC = [
    # (file stem, classes, label ids in the gt mask)
    ("im0", "dog", (12,)),
    ("im1", "cat,person", (8, 15)),
    ("im2", "boat", (4,)),
]


def make_dataset(root, seed=0):
    """Three small images with blocky objects, ground-truth masks and a manifest."""
    rng = np.random.default_rng(seed)
    (root / "JPEGImages").mkdir(parents=True, exist_ok=True)
    (root / "GT").mkdir(exist_ok=True)
    lines = []
    for i, (stem, classes, labels) in enumerate(SYNTHETIC):
        h, w = 72 + 8 * i, 96
        img = np.full((h, w, 3), (40, 120, 60), np.float64)
        gt = np.zeros((h, w), np.uint8)
        img[10:50, 20:60] = (200, 50, 50)
        gt[10:50, 20:60] = labels[0]
        if len(labels) > 1:
            img[30:70, 60:90] = (30, 30, 220)
            gt[30:70, 60:90] = labels[1]
        img = np.clip(img + rng.normal(0, 8, img.shape), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(root / "JPEGImages" / f"{stem}.png")
        save_mask(root / "GT" / f"{stem}.png", gt)
        lines.append(f"JPEGImages/{stem}.png\t{classes}\tGT/{stem}.png")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


@pytest.fixture
def dataset(tmp_path):
    return make_dataset(tmp_path / "data")
