"""Synthetic handwriting corpus, the ablation runner and report files."""
from __future__ import annotations

import colorsys
import logging
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Manifest, ManifestRow, WriterRecord, assign_classes, bmi, variant_name
from .exceptions import DivergenceError, ParameterError
from .imaging import save_image
from .metrics import CSV_HEADER, MetricsReport
from .model import ModelConfig
from .tensor import RngStream
from .training import DataSplits, TrainConfig, TrainReport, train

logger = logging.getLogger(__name__)

LETTERS = string.ascii_lowercase


# -- synthetic glyphs --------------------------------------------------------

@dataclass(frozen=True)
class WriterStyle:
    slant: float
    scale: float
    dx: float
    dy: float
    thickness: float
    ink: tuple[float, float, float]
    paper: tuple[float, float, float]


def letter_skeleton(letter: str, seed: int = 0) -> np.ndarray:
    """A connected polyline in the unit square, shared by every writer."""
    gen = RngStream(seed, "glyph").derive(letter).generator()
    n = 3 + int(gen.integers(0, 3))
    pts = [gen.uniform(0.1, 0.9, size=2)]
    while len(pts) < n:
        p = gen.uniform(0.1, 0.9, size=2)
        # long segments keep every glyph well above the dust-filter area
        if np.hypot(*(p - pts[-1])) >= 0.35:
            pts.append(p)
    return np.array(pts)


def writer_style(stream: RngStream, index: int, n_writers: int, image_size: int) -> WriterStyle:
    gen = stream.derive("writer", index).generator()
    # hues spread around the circle keep pen and paper colours distinct between writers
    hue = (index + 0.5 * gen.random()) / n_writers
    ink = colorsys.hsv_to_rgb(hue, 0.85, 0.55 + 0.2 * gen.random())
    paper = colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.35, float(gen.uniform(0.72, 0.8)))
    return WriterStyle(
        slant=float(gen.uniform(-0.35, 0.35)),
        scale=float(gen.uniform(0.6, 0.95)),
        dx=float(gen.uniform(-0.1, 0.1)),
        dy=float(gen.uniform(-0.1, 0.1)),
        thickness=float(gen.uniform(0.06, 0.12)) * image_size,
        ink=tuple(ink),
        paper=tuple(paper),
    )


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render_glyph(skeleton: np.ndarray, style: WriterStyle, size: int, gen: np.random.Generator) -> np.ndarray:
    """Draw an anti-aliased polyline on a paper-coloured (size, size, 3) uint8 tile."""
    pts = skeleton - 0.5
    slant = style.slant + gen.uniform(-0.05, 0.05)
    pts = np.column_stack([pts[:, 0] - slant * pts[:, 1], pts[:, 1]]) * style.scale
    shift = np.array([style.dx, style.dy]) + gen.uniform(-0.03, 0.03, size=2)
    pts = (pts + 0.5 + shift) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.full((size, size), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(xx, yy, a, b))
    cover = np.clip(style.thickness / 2 + 0.5 - dist, 0.0, 1.0)[:, :, None]
    rgb = np.asarray(style.paper)[None, None, :] * (1 - cover) + np.asarray(style.ink)[None, None, :] * cover
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def _writer_record(stream: RngStream, index: int) -> WriterRecord:
    gen = stream.derive("body", index).generator()
    height = round(float(gen.uniform(1.50, 1.90)), 2)
    weight = round(float(gen.uniform(45.0, 95.0)), 1)
    return WriterRecord(index, height, weight, round(bmi(height, weight), 2))


def synth_dataset(n_writers: int, chars_per_writer: int, image_size: int, stream: RngStream,
                  out_dir=None) -> tuple[list[np.ndarray], Manifest]:
    """Render ``n_writers * chars_per_writer`` crops with writer-specific style.

    Crop ``i`` of a writer is letter ``i % 26``, repetition ``i // 26 + 1``.
    When ``out_dir`` is given the crops, ``writers.csv`` and ``manifest.csv``
    are written there in the regular on-disk layout.
    """
    if n_writers < 2:
        raise ParameterError("need at least two writers")
    if image_size < 16:
        raise ParameterError(f"image_size must be >= 16 to hold strokes, got {image_size}")
    if chars_per_writer < 1:
        raise ParameterError("chars_per_writer must be >= 1")
    writers = assign_classes([_writer_record(stream, w) for w in range(n_writers)])
    images, rows = [], []
    for w in range(n_writers):
        style = writer_style(stream, w, n_writers, image_size)
        for i in range(chars_per_writer):
            letter, rep = LETTERS[i % 26], i // 26 + 1
            gen = stream.derive("sample", w * 1_000_003 + i).generator()
            images.append(render_glyph(letter_skeleton(letter, stream.master_seed), style, image_size, gen))
            rows.append(ManifestRow(f"{w}/{variant_name(letter, rep)}", w, letter, rep))
    manifest = Manifest(rows, writers, Path(out_dir) if out_dir else Path())
    if out_dir is not None:
        for img, row in zip(images, rows):
            save_image(Path(out_dir) / row.image_path, img)
        manifest.save(Path(out_dir) / "manifest.csv")
    return images, manifest


def synth_sheet(n_chars: int, stream: RngStream, cell: int = 48, cols: int = 13,
                writer: int = 0, n_writers: int = 8) -> np.ndarray:
    """A form-like sheet with ``n_chars`` glyphs on a grid (for segmentation tests)."""
    rows = -(-n_chars // cols)
    margin = cell // 2
    sheet = np.full((rows * cell + 2 * margin, cols * cell + 2 * margin, 3), 255, dtype=np.uint8)
    style = writer_style(stream, writer, n_writers, cell - 12)
    style = WriterStyle(style.slant, style.scale, 0.0, 0.0, max(style.thickness, 2.0), style.ink, (1.0, 1.0, 1.0))
    for k in range(n_chars):
        gen = stream.derive("sheet", k).generator()
        glyph = render_glyph(letter_skeleton(LETTERS[(k // 3) % 26], stream.master_seed), style, cell - 12, gen)
        r, c = divmod(k, cols)
        y, x = margin + r * cell + 6, margin + c * cell + 6
        sheet[y:y + cell - 12, x:x + cell - 12] = glyph
    return sheet


# -- ablation --------------------------------------------------------------------

@dataclass
class AblationRow:
    config: ModelConfig
    report: TrainReport | None = None
    error: str = ""

    @property
    def metrics(self) -> MetricsReport | None:
        return self.report.test_metrics if self.report else None


@dataclass
class AblationResult:
    rows: list[AblationRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["config," + ",".join(CSV_HEADER)]
        for row in self.rows:
            m = row.metrics
            lines.append(f"{row.config.name}," + (m.csv_row() if m else "nan,nan,nan,nan"))
        return "\n".join(lines) + "\n"

    def to_markdown(self) -> str:
        head = ["Config", "No. of conv layers", "Kernels", "Conv dropout (%)", "No. of hidden layers",
                "Neurons", "Hidden dropout (%)", "Accuracy (%)", "Precision (%)", "Recall (%)",
                "F1-score (%)", "Best epoch", "Stopped epoch"]
        out = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]

        def seq(v):
            return ", ".join(str(x) for x in v) or "-"

        for row in self.rows:
            c = row.config
            cells = [c.name + (f" ({c.tag})" if c.tag else ""), str(len(c.conv_kernels)), seq(c.conv_kernels),
                     seq(c.conv_dropout_pct), str(len(c.hidden_units)), seq(c.hidden_units),
                     seq(c.hidden_dropout_pct)]
            if row.metrics is not None:
                cells += row.metrics.csv_row().split(",")
                cells += [str(row.report.best_epoch), str(row.report.stopped_epoch)]
            else:
                cells += [f"failed: {row.error}"] + [""] * 5
            out.append("| " + " | ".join(cells) + " |")
        return "\n".join(out) + "\n"


def run_ablation(presets: list[ModelConfig], data: DataSplits, train_cfg: TrainConfig) -> AblationResult:
    """Train each config with the same seed and splits, in order.

    A config that diverges is recorded with its error and the run continues.
    """
    input_shape = tuple(data.X_train.shape[1:])
    result = AblationResult()
    for cfg in presets:
        cfg = cfg.with_input(channels=input_shape[0], size=input_shape[1:])
        logger.info("ablation: training %s", cfg.name)
        try:
            _, report = train(cfg, data, train_cfg)
            result.rows.append(AblationRow(cfg, report))
        except DivergenceError as exc:
            logger.warning("ablation: %s diverged: %s", cfg.name, exc)
            result.rows.append(AblationRow(cfg, error=str(exc)))
    return result


def write_run_reports(report: TrainReport, out_dir, svg: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "loss_curve.csv"]
    written[0].write_text(report.loss_curve_csv())
    if svg:
        written.append(out_dir / "loss_curve.svg")
        written[-1].write_text(report.loss_curve_svg())
    if report.test_metrics is not None:
        written.append(out_dir / "metrics.csv")
        written[-1].write_text(report.metrics_csv())
    if report.test_confusion is not None:
        written.append(out_dir / "confusion.csv")
        written[-1].write_text(report.test_confusion.to_csv())
    return written


def emit_reports(result: AblationResult, out_dir, svg: bool = True) -> list[Path]:
    if not result.rows:
        raise ValueError("ablation result is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(result.to_csv())
    (out_dir / "ablation.md").write_text(result.to_markdown())
    written = [out_dir / "ablation.csv", out_dir / "ablation.md"]
    for row in result.rows:
        if row.report is not None:
            written += write_run_reports(row.report, out_dir / row.config.name, svg=svg)
    return written
