"""Separation-first robustness evaluation and its reports.

For every item: embed a payload into a 2-second segment of each stem with its
own key, splice the segments back, normalize each stem to -16 LUFS, sum, attack
the mixture, separate, cut out the aligned segments and decode them.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackCategory, apply_attack, apply_category
from .audio import SAMPLE_RATE, AudioBuffer, SegmentLocator, crop_segment, splice_segment
from .codec import DEFAULT_CODEC, CodecConfig, Payload, ReferenceCodec, WatermarkKey
from .config import from_dict, to_jsonable
from .dsp import resample_rate
from .loudness import normalize_to_lufs
from .metrics import bit_error_rate, nmr_ratio, si_snr_db, snr_db
from .separator import SeparatorModel, separate
from .synth import SyntheticStemSet, synth_item
from .wavio import read_wav

SCHEMA_VERSION = 1
STAGES = ("embed", "splice", "normalize", "mix", "attack", "separate", "extract", "decode")
ALL_CATEGORIES = ("Origin", "BasicNoise", "Filter", "TimePitch")
STEMS = ("stem1", "stem2")
TIME_SCALING = ("SPD", "SPCH")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    dataset: str = "synthetic"
    dataset_seed: int = 0
    codec: str = "reference"
    strength: float | None = None
    separator: str = "oracle"
    categories: tuple = ALL_CATEGORIES
    items_per_category: int = 100
    master_seed: int = 0
    stems: SyntheticStemSet = SyntheticStemSet()
    codec_config: CodecConfig = DEFAULT_CODEC
    output_dir: str | None = None

    def __post_init__(self):
        if self.items_per_category < 1:
            raise ValueError("items_per_category must be >= 1")
        for c in self.categories:
            AttackCategory.parse(c)
        if self.dataset != "synthetic" and not Path(self.dataset).is_dir():
            raise ValueError(f"dataset directory {self.dataset!r} does not exist")
        for name, v in (("codec", self.codec), ("separator", self.separator)):
            if v not in ("reference", "oracle") and not Path(v).is_file():
                raise ValueError(f"{name} checkpoint {v!r} does not exist")

    def to_dict(self) -> dict:
        return to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return from_dict(cls, d)

    def report_config(self) -> dict:
        """The subset of the config that determines the results."""
        d = self.to_dict()
        d.pop("output_dir")
        return d


def item_seed(master_seed: int, *path: int) -> int:
    """64-bit seed for one item, independent of evaluation order."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(master_seed) >> 32, *path])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def load_stem_pairs(directory) -> list:
    """Sorted ``(id, stem1, stem2)`` from ``<id>.stem1.wav`` / ``<id>.stem2.wav`` pairs."""
    d = Path(directory)
    pairs = []
    for p1 in sorted(d.glob("*.stem1.wav")):
        ident = p1.name[: -len(".stem1.wav")]
        p2 = d / f"{ident}.stem2.wav"
        if not p2.exists():
            raise EvalError(f"{p1.name} has no matching {p2.name}")
        pairs.append((ident, p1, p2))
    if not pairs:
        raise EvalError(f"dataset {directory} is empty (no <id>.stem1.wav / <id>.stem2.wav pairs)")
    return pairs


def _to_rate(buf: AudioBuffer, sr: int) -> np.ndarray:
    if buf.sample_rate == sr:
        return buf.samples
    return resample_rate(buf.samples, buf.sample_rate, sr)


def load_codec(cfg: EvalConfig):
    if cfg.codec == "reference":
        c = cfg.codec_config if cfg.strength is None else cfg.codec_config.with_gamma(cfg.strength)
        return ReferenceCodec(c)
    from .joint import TrainableCodec
    try:
        return TrainableCodec.load(cfg.codec)
    except (OSError, ValueError) as exc:
        raise EvalError(f"cannot load codec checkpoint {cfg.codec}: {exc}") from exc


def load_separator(cfg: EvalConfig) -> SeparatorModel:
    if cfg.separator == "oracle":
        return SeparatorModel.oracle()
    try:
        return SeparatorModel.load(cfg.separator)
    except (OSError, ValueError) as exc:
        raise EvalError(f"cannot load separator checkpoint {cfg.separator}: {exc}") from exc


@dataclass
class _Item:
    index: int
    ident: str
    stems: tuple
    locator: SegmentLocator
    keys: tuple
    payloads: tuple


def _make_item(cfg: EvalConfig, index: int, pairs) -> _Item:
    seed = item_seed(cfg.master_seed, 0, index)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    L = cfg.codec_config.segment_length
    sr = cfg.codec_config.sample_rate
    if pairs is None:
        it = synth_item(cfg.stems, (cfg.dataset_seed, index))
        ident = f"synth{index:05d}"
        a, b = it.stem_a.samples, it.stem_b.samples
    else:
        ident, p1, p2 = pairs[index % len(pairs)]
        a, b = _to_rate(read_wav(p1), sr), _to_rate(read_wav(p2), sr)
        n = min(len(a), len(b))
        if n < L:
            raise EvalError(f"{ident}: stems shorter than one {L}-sample segment")
        a, b = a[:n], b[:n]
    loc = SegmentLocator(int(rng.integers(0, len(a) - L + 1)), L)
    keys = (WatermarkKey.random(rng), WatermarkKey.random(rng))
    payloads = (Payload.random(rng), Payload.random(rng))
    return _Item(index, ident, (AudioBuffer(a, sr), AudioBuffer(b, sr)), loc, keys, payloads)


def _extract_locator(loc: SegmentLocator, spec, n: int) -> SegmentLocator:
    """Aligned slice in the attacked signal; time-scaling attacks move the start."""
    start = loc.start
    if spec is not None and spec.kind in TIME_SCALING:
        start = int(round(loc.start / spec.params["speed"]))
    return SegmentLocator(min(max(start, 0), n - loc.length), loc.length)


def _finite(v: float) -> float:
    return float(v) if math.isfinite(v) else 0.0


def _evaluate_item(cfg: EvalConfig, index: int, pairs, codec, sep_model):
    """All requested categories for one item; returns ``(records, separation, traces)``."""
    it = _make_item(cfg, index, pairs)
    loc = it.locator
    trace_base = []
    segments, marked, normalized, clean_norm = [], [], [], []
    trace_base.append("embed")
    for stem, key, payload in zip(it.stems, it.keys, it.payloads):
        seg = crop_segment(stem, loc)
        segments.append(seg)
        marked.append(codec.embed(seg, key, payload))
    trace_base.append("splice")
    carriers = [splice_segment(stem, wm, loc) for stem, wm in zip(it.stems, marked)]
    trace_base.append("normalize")
    normalized = [normalize_to_lufs(c) for c in carriers]
    clean_norm = [normalize_to_lufs(s) for s in it.stems]
    trace_base.append("mix")
    mixture = normalized[0].with_samples(normalized[0].samples + normalized[1].samples)

    wm_stats = []
    for seg, wm in zip(segments, marked):
        wm_stats.append({"wm_snr_db": snr_db(seg, wm), "wm_nmr": nmr_ratio(seg, wm),
                         "wm_si_snr_db": si_snr_db(seg, wm)})

    # separation integrity on the unattacked mixture, with and without watermarks
    clean_mix = clean_norm[0].with_samples(clean_norm[0].samples + clean_norm[1].samples)
    sep_clean = separate(sep_model, clean_mix, clean_norm).stems
    sep_marked = separate(sep_model, mixture, normalized).stems
    separation = []
    for j in range(2):
        separation.append({
            "before_sdr_db": snr_db(clean_norm[j], sep_clean[j]),
            "before_si_sdr_db": si_snr_db(clean_norm[j], sep_clean[j]),
            "after_sdr_db": snr_db(normalized[j], sep_marked[j]),
            "after_si_sdr_db": si_snr_db(normalized[j], sep_marked[j]),
        })

    records, traces = [], []
    for c_index, cname in enumerate(ALL_CATEGORIES):
        if cname not in cfg.categories:
            continue
        category = AttackCategory.parse(cname)
        trace = list(trace_base)
        trace.append("attack")
        attacked, spec = apply_category(mixture, category, item_seed(cfg.master_seed, 1, c_index, index))
        trace.append("separate")
        refs = normalized if spec is None else [apply_attack(n, spec) for n in normalized]
        estimates = separate(sep_model, attacked, refs).stems
        trace.append("extract")
        xloc = _extract_locator(loc, spec, len(attacked))
        slices = [crop_segment(e, xloc) for e in estimates]
        trace.append("decode")
        for j in range(2):
            decoded, _ = codec.decode(slices[j], it.keys[j])
            try:
                sep_si = si_snr_db(refs[j], estimates[j])
            except ValueError:
                sep_si = -150.0
            records.append({
                "category": cname,
                "item": index,
                "id": it.ident,
                "stem": STEMS[j],
                "locator": {"start": loc.start, "length": loc.length},
                "extract_locator": {"start": xloc.start, "length": xloc.length},
                "attack": "identity" if spec is None else spec.to_dict(),
                "ber": 100.0 * bit_error_rate(it.payloads[j], decoded),
                "sep_si_snr_db": _finite(sep_si),
                **wm_stats[j],
            })
        traces.append((cname, index, trace))
    return records, separation, traces


def _worker(args):
    cfg, index, pairs, codec, sep_model = args
    return _evaluate_item(cfg, index, pairs, codec, sep_model)


@dataclass
class EvalReport:
    config: dict
    records: list
    aggregates: dict
    separation: dict
    imperceptibility: dict
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "config": self.config, "aggregates": self.aggregates,
                "separation": self.separation, "imperceptibility": self.imperceptibility, "records": self.records}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema {d.get('schema_version')}")
        return cls(d["config"], d["records"], d["aggregates"], d["separation"], d["imperceptibility"],
                   d["schema_version"])

    def mean_ber(self, stem: str, category: str) -> float:
        return self.aggregates[stem][category]["mean_ber"]

    def category_ber(self, category: str) -> float:
        """Mean BER (%) over both stems."""
        vals = [r["ber"] for r in self.records if r["category"] == category]
        return float(np.mean(vals))


def _mean(vals):
    return float(np.mean(vals)) if vals else 0.0


def aggregate(records, categories) -> dict:
    out = {}
    for stem in STEMS:
        out[stem] = {}
        for c in categories:
            vals = [r["ber"] for r in records if r["stem"] == stem and r["category"] == c]
            out[stem][c] = {"mean_ber": _mean(vals), "count": len(vals)}
    return out


def run_separation_first_eval(cfg: EvalConfig, jobs: int = 1, stage_hook=None) -> EvalReport:
    """Run the evaluation; ``jobs > 1`` fans items out to worker processes.

    ``stage_hook(category, item, stage)`` is called for every pipeline stage of
    every (category, item) in stage order.
    """
    pairs = None if cfg.dataset == "synthetic" else load_stem_pairs(cfg.dataset)
    codec = load_codec(cfg)
    sep_model = load_separator(cfg)
    n = cfg.items_per_category
    work = [(cfg, i, pairs, codec, sep_model) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, work, chunksize=max(1, n // (4 * jobs))))
    else:
        results = [_worker(w) for w in work]
    records, seps = [], []
    for recs, sep, traces in results:
        records.extend(recs)
        seps.append(sep)
        if stage_hook is not None:
            for cname, index, trace in traces:
                for stage in trace:
                    stage_hook(cname, index, stage)
    categories = [c for c in ALL_CATEGORIES if c in cfg.categories]
    separation = {}
    imperceptibility = {}
    for j, stem in enumerate(STEMS):
        separation[stem] = {k: _mean([s[j][k] for s in seps]) for k in seps[0][j]}
        first = [r for r in records if r["stem"] == stem and r["category"] == categories[0]]
        imperceptibility[stem] = {
            "snr_db_mean": _mean([r["wm_snr_db"] for r in first]),
            "snr_db_min": float(min(r["wm_snr_db"] for r in first)),
            "nmr_mean": _mean([r["wm_nmr"] for r in first]),
            "si_snr_db_mean": _mean([r["wm_si_snr_db"] for r in first]),
        }
    return EvalReport(cfg.report_config(), records, aggregate(records, categories), separation, imperceptibility)


CSV_FIELDS = ("row", "category", "item", "id", "stem", "locator_start", "extract_start", "attack_kind",
              "attack_params", "attack_seed", "ber", "count", "wm_snr_db", "wm_nmr", "wm_si_snr_db", "sep_si_snr_db")


def _csv_rows(report: EvalReport):
    for r in report.records:
        attack = r["attack"]
        identity = attack == "identity"
        yield {
            "row": "item", "category": r["category"], "item": r["item"], "id": r["id"], "stem": r["stem"],
            "locator_start": r["locator"]["start"], "extract_start": r["extract_locator"]["start"],
            "attack_kind": "identity" if identity else attack["kind"],
            "attack_params": "" if identity else json.dumps(attack["params"], sort_keys=True),
            "attack_seed": "" if identity else attack["seed"],
            "ber": repr(r["ber"]), "count": 1, "wm_snr_db": repr(r["wm_snr_db"]), "wm_nmr": repr(r["wm_nmr"]),
            "wm_si_snr_db": repr(r["wm_si_snr_db"]), "sep_si_snr_db": repr(r["sep_si_snr_db"]),
        }
    for stem, cats in report.aggregates.items():
        for c, agg in cats.items():
            yield {"row": "aggregate", "category": c, "stem": stem, "ber": repr(agg["mean_ber"]),
                   "count": agg["count"]}


def emit_report(report: EvalReport, fmt: str, path) -> Path:
    """Write ``report`` as ``json`` (full nesting) or ``csv`` (item rows then aggregate rows)."""
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
        elif fmt == "csv":
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
                w.writeheader()
                w.writerows(_csv_rows(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise EvalError(f"cannot write report to {path}: {exc}") from exc
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text()))


def format_table(report: EvalReport) -> str:
    """Mean BER (%) per stem and category, in the column order Origin, Basic/Noise, Filter, Time/Pitch."""
    cats = [c for c in ALL_CATEGORIES if c in next(iter(report.aggregates.values()))]
    labels = [AttackCategory.parse(c).label for c in cats]
    lines = ["Stem    " + "".join(f"{lab:>13}" for lab in labels)]
    for stem in STEMS:
        lines.append(f"{stem:<8}" + "".join(f"{report.mean_ber(stem, c):>13.2f}" for c in cats))
    return "\n".join(lines)
