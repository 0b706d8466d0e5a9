"""``stemmark`` command line.

Every subcommand accepts ``--config FILE`` (JSON), ``--seed``, ``--dry-run`` and
``-v/-q``. The config file is an object with any of these keys::

    seed        root seed (int)
    codec       CodecConfig fields (gamma, fft_size, hop, ...)
    attack      {"chain": [{"kind", "params" | "sample", "seed"}, ...]}
    eval        EvalConfig fields (dataset, codec, separator, categories, ...)
    train       TrainConfig fields (steps, learning_rate, wiring, weights, ...)

Unknown keys are rejected. Command-line flags override file values. The root
seed comes from ``--seed``, else the file's ``seed``, else ``STEMMARK_SEED``,
else 0; commands use named sub-seeds derived from it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .attacks import KINDS, AttackCategory, AttackChain, apply_category
from .audio import SegmentLocator, crop_segment, splice_segment
from .codec import CodecConfig, Payload, ReferenceCodec, WatermarkKey, read_key_file, read_payload_file
from .config import ConfigError, from_dict, to_jsonable
from .evaluation import EvalConfig, emit_report, format_table, load_report, run_separation_first_eval
from .metrics import bit_error_rate
from .separator import SeparatorModel, learnable_separate, oracle_mask_separate
from .wavio import read_wav, write_wav

log = logging.getLogger("stemmark")

CONFIG_KEYS = ("seed", "codec", "attack", "eval", "train")
SEED_ENV = "STEMMARK_SEED"


class CommandError(Exception):
    """A user-facing failure; maps to exit code 1."""


def subseed(root: int, name: str) -> int:
    """Named 63-bit sub-seed of ``root``."""
    digest = hashlib.blake2b(f"{root}/{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CommandError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CommandError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return data


def resolve_seed(args, file_cfg: dict):
    """Return ``(seed, source)``."""
    if args.seed is not None:
        return args.seed, "--seed"
    if "seed" in file_cfg:
        return int(file_cfg["seed"]), "config"
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env), SEED_ENV
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0, "default"


def _codec_config(file_cfg, args) -> CodecConfig:
    cfg = from_dict(CodecConfig, file_cfg.get("codec", {}), "codec.")
    if getattr(args, "strength", None) is not None:
        cfg = cfg.with_gamma(args.strength)
    return cfg


def _key(text: str) -> WatermarkKey:
    if len(text) == 64 and all(c in "0123456789abcdefABCDEF" for c in text):
        return WatermarkKey.from_hex(text)
    return read_key_file(text)


def _payload(text: str) -> Payload:
    if len(text) == 32 and set(text) <= {"0", "1"}:
        return Payload.from_string(text)
    return read_payload_file(text)


def _load_codec(path, codec_cfg):
    if path in (None, "reference"):
        return ReferenceCodec(codec_cfg)
    from .joint import TrainableCodec
    return TrainableCodec.load(path)


def _segment_locator(buffer, start, cfg: CodecConfig) -> SegmentLocator:
    loc = SegmentLocator(start, cfg.segment_length)
    try:
        loc.check(len(buffer))
    except IndexError as exc:
        raise CommandError(f"audio has {len(buffer)} samples; a segment needs {cfg.segment_length} "
                           f"from sample {start}") from exc
    return loc


# subcommands: each returns a resolved-config dict and a thunk that does the work

def cmd_embed(args, file_cfg, seed):
    cfg = _codec_config(file_cfg, args)
    resolved = {"in": args.input, "out": args.out, "start": args.start, "codec": args.codec or "reference",
                "codec_config": to_jsonable(cfg), "encoding": args.encoding}

    def run():
        buf = read_wav(args.input)
        loc = _segment_locator(buf, args.start, cfg)
        codec = _load_codec(args.codec, cfg)
        marked = codec.embed(crop_segment(buf, loc), _key(args.key), _payload(args.bits))
        clipped = write_wav(splice_segment(buf, marked, loc), args.out, args.encoding)
        print(f"embedded {cfg.segment_length} samples at {loc.start} -> {args.out}"
              + (f" ({clipped} samples clipped)" if clipped else ""))
    return resolved, run


def cmd_decode(args, file_cfg, seed):
    cfg = _codec_config(file_cfg, args)
    resolved = {"in": args.input, "start": args.start, "codec": args.codec or "reference",
                "codec_config": to_jsonable(cfg)}

    def run():
        buf = read_wav(args.input)
        loc = _segment_locator(buf, args.start, cfg)
        payload, scores = _load_codec(args.codec, cfg).decode(crop_segment(buf, loc), _key(args.key))
        print(f"payload: {payload}")
        if args.bits:
            print(f"ber: {bit_error_rate(_payload(args.bits), payload):.4f}")
        if args.scores:
            print("scores: " + " ".join(f"{s:.3f}" for s in scores))
    return resolved, run


def cmd_attack(args, file_cfg, seed):
    attack_seed = subseed(seed, "attack")
    chain_cfg = file_cfg.get("attack", {})
    unknown = sorted(set(chain_cfg) - {"chain"})
    if unknown:
        raise ConfigError(f"attack: unknown key(s) {', '.join(unknown)}")
    if args.kind:
        params = json.loads(args.params) if args.params else "sample"
        chain = AttackChain.from_config([{"kind": args.kind, "params": params, "seed": attack_seed}])
        resolved_chain = chain.to_config()
    elif args.category:
        category = AttackCategory.parse(args.category)
        resolved_chain = {"category": category.value, "seed": attack_seed}
        chain = None
    elif "chain" in chain_cfg:
        chain = AttackChain.from_config(chain_cfg["chain"])
        resolved_chain = chain.to_config()
    else:
        raise CommandError("give --kind, --category or an attack.chain in the config")
    resolved = {"in": args.input, "out": args.out, "attack": resolved_chain,
                "seed_derivation": f"root {seed} -> attack {attack_seed}"}

    def run():
        buf = read_wav(args.input)
        if chain is None:
            out, spec = apply_category(buf, category, attack_seed)
            desc = "identity" if spec is None else json.dumps(spec.to_dict(), sort_keys=True)
        else:
            out = chain.apply(buf)
            desc = json.dumps(chain.to_config(), sort_keys=True)
        write_wav(out, args.out, args.encoding)
        print(f"attack: {desc}")
    return resolved, run


def cmd_separate(args, file_cfg, seed):
    resolved = {"in": args.input, "separator": args.separator, "out_prefix": args.out_prefix,
                "references": args.ref}

    def run():
        mix = read_wav(args.input)
        if args.separator == "oracle":
            if not args.ref or len(args.ref) != 2:
                raise CommandError("oracle separation needs --ref STEM1 --ref STEM2")
            out = oracle_mask_separate(mix, [read_wav(p) for p in args.ref])
        else:
            out = learnable_separate(SeparatorModel.load(args.separator), mix)
        for i, stem in enumerate(out.stems, 1):
            path = f"{args.out_prefix}.stem{i}.wav"
            write_wav(stem, path, args.encoding)
            print(f"wrote {path}")
    return resolved, run


def cmd_evaluate(args, file_cfg, seed):
    section = dict(file_cfg.get("eval", {}))
    if "codec" in file_cfg:
        section["codec_config"] = file_cfg["codec"]
    overrides = {"items_per_category": args.items, "codec": args.codec, "separator": args.separator,
                 "dataset": args.dataset, "strength": args.strength, "output_dir": args.out}
    section.update({k: v for k, v in overrides.items() if v is not None})
    if args.categories:
        section["categories"] = args.categories
    if args.seed is not None or "seed" in file_cfg or "master_seed" not in section:
        section["master_seed"] = subseed(seed, "evaluate")
    cfg = EvalConfig.from_dict(section)
    resolved = {"eval": cfg.to_dict(), "jobs": args.jobs,
                "seed_derivation": f"root {seed} -> evaluate {cfg.master_seed}"}

    def run():
        report = run_separation_first_eval(cfg, jobs=args.jobs)
        if cfg.output_dir:
            out = Path(cfg.output_dir)
            out.mkdir(parents=True, exist_ok=True)
            emit_report(report, "json", out / "report.json")
            emit_report(report, "csv", out / "report.csv")
        print("Mean BER (%) after separation")
        print(format_table(report))
    return resolved, run


def cmd_train(args, file_cfg, seed):
    from .joint import TrainConfig, train_joint
    section = dict(file_cfg.get("train", {}))
    if "codec" in file_cfg:
        section["codec"] = file_cfg["codec"]
    overrides = {"steps": args.steps, "out_dir": args.out, "wiring": args.wiring}
    section.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None or "seed" in file_cfg or "seed" not in section:
        section["seed"] = subseed(seed, "train")
    if "attack_start_step" not in section and "steps" in section:
        section["attack_start_step"] = min(TrainConfig().attack_start_step, section["steps"])
    cfg = TrainConfig.from_dict(section)
    resolved = {"train": cfg.to_dict(), "seed_derivation": f"root {seed} -> train {cfg.seed}"}

    def run():
        res = train_joint(cfg, resume=args.resume)
        probes = [r for r in res.curves if r.get("probe_ber", "") != ""]
        if probes:
            print(f"post-separation BER probe: step {probes[0]['step']}: {probes[0]['probe_ber']:.4f} -> "
                  f"step {probes[-1]['step']}: {probes[-1]['probe_ber']:.4f}")
        for p in res.checkpoints:
            print(f"checkpoint: {p}")
    return resolved, run


def cmd_report(args, file_cfg, seed):
    resolved = {"in": args.input, "format": args.format, "out": args.out}

    def run():
        report = load_report(args.input)
        if args.out:
            emit_report(report, args.format, args.out)
        print(format_table(report))
    return resolved, run


def _common(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help=f"root seed (falls back to the config, then ${SEED_ENV})")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stemmark", description="Separation-first multi-stem audio watermarking lab")
    parser.add_argument("--version", action="version", version=f"stemmark {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("embed", help="embed a 32-bit payload into a WAV file")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--key", required=True, help="64 hex characters or a key file")
    p.add_argument("--bits", required=True, help="32 characters of 0/1 or a payload file")
    p.add_argument("--out", required=True)
    p.add_argument("--start", type=int, default=0, help="segment start sample")
    p.add_argument("--strength", type=float, help="modulation depth (overrides codec.gamma)")
    p.add_argument("--codec", help="trained codec checkpoint (default: reference codec)")
    p.add_argument("--encoding", choices=("float32", "pcm16", "pcm24"), default="float32")
    p.set_defaults(handler=cmd_embed)

    p = sub.add_parser("decode", help="decode the payload of a WAV file")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--bits", help="expected payload; prints the BER")
    p.add_argument("--scores", action="store_true", help="print per-bit scores")
    p.add_argument("--strength", type=float)
    p.add_argument("--codec")
    p.set_defaults(handler=cmd_decode)

    p = sub.add_parser("attack", help="apply an attack to a WAV file")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--kind", choices=KINDS)
    g.add_argument("--category", help="Origin, BasicNoise, Filter or TimePitch")
    p.add_argument("--params", help="JSON parameter object (default: sampled from the seed)")
    p.add_argument("--encoding", choices=("float32", "pcm16", "pcm24"), default="float32")
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser("separate", help="split a two-stem mixture")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--separator", required=True, help="'oracle' or a separator checkpoint")
    p.add_argument("--ref", action="append", help="reference stem for the oracle (give twice)")
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--encoding", choices=("float32", "pcm16", "pcm24"), default="float32")
    p.set_defaults(handler=cmd_separate)

    p = sub.add_parser("evaluate", help="run the separation-first robustness evaluation")
    _common(p)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--items", type=int, help="items per category")
    p.add_argument("--categories", nargs="+")
    p.add_argument("--codec", help="'reference' or a trained codec checkpoint")
    p.add_argument("--separator", help="'oracle' or a separator checkpoint")
    p.add_argument("--dataset", help="'synthetic' or a directory of <id>.stem1.wav/<id>.stem2.wav")
    p.add_argument("--strength", type=float)
    p.add_argument("--out", help="directory for report.json and report.csv")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("train-toy", help="run the toy joint training")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--wiring", choices=("sep_loss_only", "sep_loss_plus_bce"))
    p.add_argument("--out", help="directory for checkpoints and curves.csv")
    p.add_argument("--resume", help="joint checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("report", help="print or convert an evaluation report")
    _common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="csv")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_report)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        file_cfg = load_config_file(args.config)
        seed, source = resolve_seed(args, file_cfg)
        resolved, work = args.handler(args, file_cfg, seed)
        resolved = {"command": args.command, "seed": seed, "seed_source": source, **resolved}
        text = json.dumps(to_jsonable(resolved), sort_keys=True, indent=1)
        if args.dry_run:
            print(text)
            return 0
        log.info("resolved config: %s", json.dumps(to_jsonable(resolved), sort_keys=True))
        work()
        return 0
    except (CommandError, ConfigError, ValueError, OSError, KeyError, FloatingPointError, RuntimeError) as exc:
        print(f"stemmark {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())
