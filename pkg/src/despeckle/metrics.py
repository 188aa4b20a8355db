"""Speckle-region SNR, ROI intensity PDFs, KL divergence and the comparison report."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import Image


class UndefinedSSNRError(ValueError):
    """The ROI has zero variance."""


@dataclass(frozen=True)
class Roi:
    x: int
    y: int
    w: int
    h: int
    label: str = "roi"

    MIN_AREA = 256

    def validate(self, shape: tuple[int, int]) -> None:
        if self.w * self.h < self.MIN_AREA:
            raise ValueError(f"ROI {self.label!r} area {self.w * self.h} below {self.MIN_AREA} pixels")
        if self.x < 0 or self.y < 0 or self.x + self.w > shape[1] or self.y + self.h > shape[0]:
            raise ValueError(f"ROI {self.label!r} extends outside image of shape {shape}")

    def crop(self, image) -> np.ndarray:
        pixels = image.pixels if isinstance(image, Image) else np.asarray(image)
        self.validate(pixels.shape)
        return pixels[self.y:self.y + self.h, self.x:self.x + self.w]


def parse_rois(text: str) -> list[Roi]:
    """One ``label x y w h`` line per ROI; blank lines and ``#`` comments are skipped."""
    rois = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"ROI line {lineno}: expected 'label x y w h', got {line!r}")
        label, *nums = parts
        x, y, w, h = (int(v) for v in nums)
        rois.append(Roi(x, y, w, h, label))
    return rois


def read_rois(path: str | Path) -> list[Roi]:
    return parse_rois(Path(path).read_text())


def ssnr(image, roi: Roi) -> float:
    """Mean over population standard deviation of the ROI, on the 0-255 scale."""
    vals = roi.crop(image).astype(np.float64) * 255.0
    sd = vals.std()
    if sd == 0:
        raise UndefinedSSNRError(f"ROI {roi.label!r} has zero variance")
    return float(vals.mean() / sd)


def intensity_pdf(image, roi: Roi, bins: int = 256) -> np.ndarray:
    vals = roi.crop(image).astype(np.float64).ravel()
    counts, _ = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return counts / counts.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray, epsilon: float = 1e-10) -> float:
    """KL(p || q) in nats after adding ``epsilon`` to every bin and renormalizing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"pdf lengths differ: {p.shape} vs {q.shape}")
    p = (p + epsilon) / (p + epsilon).sum()
    q = (q + epsilon) / (q + epsilon).sum()
    return float(np.sum(p * np.log(p / q)))


@dataclass
class ReportRow:
    image: str
    roi: str
    ssnr_y: float
    ssnr_x: float
    ssnr_xhat: float
    kl_x_xhat: float
    kl_y_xhat: float
    kl_y_x: float
    seconds: float | None = None


COLUMNS = ("image", "roi", "ssnr_y", "ssnr_x", "ssnr_xhat", "kl_x_xhat", "kl_y_xhat", "kl_y_x",
           "seconds")


@dataclass
class MetricsReport:
    rows: list[ReportRow] = field(default_factory=list)
    pdfs: dict[tuple[str, str, str], np.ndarray] = field(default_factory=dict)

    def mean(self, column: str) -> float:
        return float(np.mean([getattr(r, column) for r in self.rows]))

    def _cells(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            cells = []
            for c in COLUMNS:
                v = getattr(r, c)
                cells.append("-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v))
            out.append(cells)
        return out

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(COLUMNS) + "\n")
        for cells in self._cells():
            buf.write("\t".join(cells) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [list(COLUMNS)] + self._cells()
        widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
        lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.rows:
            means = ["mean", ""] + [f"{self.mean(c):.4f}" for c in COLUMNS[2:8]] + [""]
            lines.append("  ".join(v.rjust(w) for v, w in zip(means, widths)))
        return "\n".join(lines) + "\n"


def _name(img, i: int) -> str:
    if isinstance(img, Image) and img.source:
        return Path(img.source).name
    return f"image{i}"


def evaluate(reference_imgs, input_imgs, despeckled_imgs, rois: list[Roi],
             timings: list[float] | None = None, bins: int = 256) -> MetricsReport:
    """Per image and ROI: SSNR of y, x and x-hat plus KL(x, x-hat), KL(y, x-hat), KL(y, x).

    The three image lists are aligned by position; ``timings`` holds the
    despeckling wall-clock seconds per image.
    """
    if not (len(reference_imgs) == len(input_imgs) == len(despeckled_imgs)):
        raise ValueError("reference, input and despeckled lists must have equal length")
    if timings is not None and len(timings) != len(input_imgs):
        raise ValueError("one timing per image is required")
    report = MetricsReport()
    for i, (y, x, xh) in enumerate(zip(reference_imgs, input_imgs, despeckled_imgs)):
        name = _name(x, i)
        for roi in rois:
            py, px, pxh = (intensity_pdf(im, roi, bins) for im in (y, x, xh))
            report.pdfs[(name, roi.label, "y")] = py
            report.pdfs[(name, roi.label, "x")] = px
            report.pdfs[(name, roi.label, "xhat")] = pxh
            report.rows.append(ReportRow(
                name, roi.label, ssnr(y, roi), ssnr(x, roi), ssnr(xh, roi),
                kl_divergence(px, pxh), kl_divergence(py, pxh), kl_divergence(py, px),
                None if timings is None else float(timings[i])))
    return report
