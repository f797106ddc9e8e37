"""Test-split evaluation and the metrics report files.

A report is written twice: ``<name>.json`` (schema below, numbers rounded
to 6 significant digits, PSNR of identical images as the string ``"inf"``)
and ``<name>.tsv`` with one ``id ssim psnr`` row per image.  Spreads are
labelled explicitly: ``std`` is the sample standard deviation (n - 1) and
``stderr`` is ``std / sqrt(count)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .errors import DimensionError, FormatError, UndefinedMetricError
from .metrics import psnr, roc_auc, ssim, summarize
from .phantom import Dataset

REPORT_FORMAT = "bonesup-metrics"
REPORT_VERSION = 1

_num = {"type": ["number", "null"]}
_stats = {
    "type": "object",
    "required": ["mean", "std", "stderr", "count"],
    "additionalProperties": False,
    "properties": {"mean": _num, "std": _num, "stderr": _num, "count": {"type": "integer", "minimum": 0}},
}
REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "model", "split", "config", "rows", "aggregates", "auc", "omitted"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "version": {"const": REPORT_VERSION},
        "model": {"type": "string"},
        "split": {"type": "string"},
        "config": {"type": "object"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "ssim", "psnr"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "ssim": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                    "psnr": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "inf"}, {"type": "null"}]},
                },
            },
        },
        "aggregates": {
            "type": "object",
            "required": ["ssim", "psnr"],
            "additionalProperties": False,
            "properties": {"ssim": _stats, "psnr": _stats},
        },
        "auc": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["value", "n_positive", "n_negative"],
                    "additionalProperties": False,
                    "properties": {
                        "value": {"type": "number", "minimum": 0, "maximum": 1},
                        "n_positive": {"type": "integer", "minimum": 1},
                        "n_negative": {"type": "integer", "minimum": 1},
                    },
                },
            ]
        },
        "omitted": {"type": "array", "items": {"type": "string"}},
    },
}


def sig6(x):
    """Round to 6 significant digits (None and inf pass through)."""
    if x is None or not math.isfinite(x):
        return x
    return float(f"{x:.6g}")


def _round_stats(stats):
    return {k: (v if k == "count" else sig6(v)) for k, v in stats.items()}


@dataclass
class MetricsReport:
    model: str
    split: str
    rows: list
    aggregates: dict
    auc: dict | None = None
    omitted: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, model, split, ids, ssims, psnrs, auc=None, omitted=(), config=None):
        """Build a report, rounding per-image values first and aggregating the rounded rows."""
        rows = [
            {"id": i, "ssim": sig6(s), "psnr": sig6(p)}
            for i, s, p in zip(ids, ssims, psnrs)
        ]
        aggregates = {}
        for key in ("ssim", "psnr"):
            values = [r[key] for r in rows if r[key] is not None]
            aggregates[key] = _round_stats(summarize(values))
        if auc is not None:
            auc = dict(auc, value=sig6(auc["value"]))
        return cls(model, split, rows, aggregates, auc, list(omitted), dict(config or {}))

    def to_dict(self):
        rows = [dict(r, psnr="inf" if r["psnr"] == math.inf else r["psnr"]) for r in self.rows]
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "model": self.model,
            "split": self.split,
            "config": self.config,
            "rows": rows,
            "aggregates": self.aggregates,
            "auc": self.auc,
            "omitted": self.omitted,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
            jsonschema.validate(data, REPORT_SCHEMA)
        except (json.JSONDecodeError, jsonschema.ValidationError) as exc:
            raise FormatError(f"invalid metrics report: {exc}") from None
        rows = [dict(r, psnr=math.inf if r["psnr"] == "inf" else r["psnr"]) for r in data["rows"]]
        return cls(
            data["model"], data["split"], rows, data["aggregates"], data["auc"], data["omitted"], data["config"]
        )

    def to_tsv(self):
        def fmt(v):
            if v is None:
                return ""
            if v == math.inf:
                return "inf"
            return f"{v:.6g}"

        lines = ["id\tssim\tpsnr"] + [f"{r['id']}\t{fmt(r['ssim'])}\t{fmt(r['psnr'])}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        """Write ``path`` (JSON) and the per-image TSV next to it."""
        base, _ = os.path.splitext(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
        with open(base + ".tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_tsv())


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        return MetricsReport.from_json(fh.read())


def _translator(model, direction):
    if hasattr(model, "translate"):
        gen = model.generator(direction)
        return (lambda images: model.translate(images, direction)), getattr(gen, "image_size", None)
    return model, None


def evaluate_model(
    model,
    dataset,
    out_path=None,
    split="test",
    classifier=None,
    model_id="model",
    direction="forward",
    config=None,
):
    """Translate a split's standard images and score them.

    ``model`` is a :class:`~bonesup.training.TranslationModel` or any callable
    mapping (N, H, W) images in [0, 1] to images of the same shape.  SSIM and
    PSNR against ``soft/`` are omitted (and listed in ``omitted``) when the
    dataset has no soft-tissue layer; AUC is computed only with a classifier
    and both labels present in the split.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    ids = dataset.ids(split)
    if not ids:
        raise DimensionError(f"split {split!r} is empty")
    translate, size = _translator(model, direction)
    standard = dataset.load("standard", ids)
    if size is not None and standard.shape[1:] != (size, size):
        raise DimensionError(f"model expects {size}px images, dataset has {standard.shape[1:]}")
    generated = np.asarray(translate(standard), dtype=np.float32)
    if generated.shape != standard.shape:
        raise DimensionError(f"translator returned {generated.shape} for {standard.shape}")

    omitted = []
    if dataset.has_layer("soft"):
        soft = dataset.load("soft", ids)
        ssims = [ssim(g, t) for g, t in zip(generated, soft)]
        psnrs = [psnr(g, t) for g, t in zip(generated, soft)]
    else:
        ssims = psnrs = [None] * len(ids)
        omitted += ["ssim: no soft-tissue ground truth", "psnr: no soft-tissue ground truth"]

    auc = None
    if classifier is not None:
        labels = dataset.labels(ids)
        try:
            value = roc_auc(classifier.scores(generated), labels)
            auc = {"value": value, "n_positive": int(labels.sum()), "n_negative": int((~labels).sum())}
        except UndefinedMetricError:
            omitted.append("auc: split contains a single class")
    else:
        omitted.append("auc: no classifier supplied")

    report = MetricsReport.from_values(model_id, split, ids, ssims, psnrs, auc, omitted, config)
    if out_path is not None:
        report.write(out_path)
    return report
