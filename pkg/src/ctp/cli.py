"""Command-line entry point: ``ctp <subcommand> [flags]``.

Settings resolve as defaults < ``--config`` file < ``--set section.key=value``
< dedicated flags.  The resolved settings are written to ``OUT/config.ini``
and can be fed back through ``--config`` to repeat a run exactly.

Exit codes: 0 success, 2 invalid input or configuration, 3 a check failed.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .compare import format_comparison, run_comparison, summarize
from .dataset import (SynthConfig, generate_synthetic, read_manifest, read_prototypes,
                      write_manifest, write_prototypes)
from .diff import gradcheck_sweep, loss_and_grad_features, oracle_sweep
from .errors import CTPError
from .losses import LOSS_TAGS, LossConfig
from .training import REFERENCE_PROFILE, Checkpoint, TrainConfig, train, write_log
from .zeroshot import MODES, evaluate_modes, format_table, write_reports

log = logging.getLogger("ctp")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CHECK_FAILED = 3


class ConfigError(CTPError, ValueError):
    pass


IO_DEFAULTS = {"data_dir": "", "train_manifest": "", "test_manifest": "", "prototypes": "",
               "checkpoint": ""}
EVAL_DEFAULTS = {"mode": "all"}
CHECK_DEFAULTS = {"seeds": 3, "b": [2, 3, 4, 6], "d": 8, "tol_grad": 1e-6, "tol_oracle": 1e-10,
                  "epsilon": 1e-5, "flip_sign": ""}
COMPARE_DEFAULTS = {"seeds": 3}
BENCH_DEFAULTS = {"b": [8, 16, 32, 64, 128], "d": 32, "repeats": 5}


def _defaults() -> dict:
    train_defaults = asdict(TrainConfig())
    train_defaults["freeze"] = []
    train_defaults["betas"] = list(train_defaults["betas"])
    return {
        "data": asdict(SynthConfig()),
        "train": train_defaults,
        "io": dict(IO_DEFAULTS),
        "eval": dict(EVAL_DEFAULTS),
        "check": dict(CHECK_DEFAULTS),
        "compare": dict(COMPARE_DEFAULTS),
        "bench": dict(BENCH_DEFAULTS),
    }


def parse_value(text: str, like):
    """Parse an INI / --set string using the default's type as the guide."""
    text = text.strip()
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if isinstance(like, list) or (like is None and isinstance(value, str) and "," in value):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
            value = [json.loads(v) if _is_number(v) else v for v in value]
        elif not isinstance(value, list):
            value = [value]
    elif isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {text!r}")
    elif isinstance(like, int) and not isinstance(like, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {text!r}")
    elif isinstance(like, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"expected a number, got {text!r}")
        value = float(value)
    elif isinstance(like, str):
        value = text
    return value


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


class Settings:
    """Sectioned key/value settings with type-checked overrides."""

    def __init__(self):
        self.values = _defaults()

    def set(self, section: str, key: str, value):
        if section not in self.values:
            raise ConfigError(f"unknown section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        like = self.values[section][key]
        self.values[section][key] = parse_value(value, like) if isinstance(value, str) else value

    def load(self, path):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        if not cp.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        for section in cp.sections():
            for key, raw in cp.items(section):
                self.set(section, key, raw)

    def apply_overrides(self, items):
        for item in items or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            lhs, rhs = item.split("=", 1)
            section, key = lhs.split(".", 1)
            self.set(section.strip(), key.strip(), rhs)

    def dump(self, sections) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for s in sections:
            cp[s] = {k: json.dumps(v) if not isinstance(v, str) else v for k, v in self.values[s].items()}
        from io import StringIO

        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    def synth(self) -> SynthConfig:
        return SynthConfig(**self.values["data"])

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.values["train"])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(settings: Settings, sections, out: Path):
    (out / "config.ini").write_text(settings.dump(sections), encoding="utf-8")


def _resolve(args, flag_map: dict, profile: dict | None = None) -> Settings:
    st = Settings()
    for key, value in (profile or {}).items():
        st.set("train", key, value)
    if args.config:
        st.load(args.config)
    st.apply_overrides(args.set)
    for attr, (section, key) in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            st.set(section, key, v)
    return st


def _path(st: Settings, key: str, fallback: str) -> Path:
    explicit = st.values["io"][key]
    if explicit:
        return Path(explicit)
    base = st.values["io"]["data_dir"]
    if not base:
        raise ConfigError(f"need --data DIR or io.{key}")
    return Path(base) / fallback


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    st = _resolve(args, {"classes": ("data", "num_classes"), "train": ("data", "n_train"),
                         "test": ("data", "n_test"), "seed": ("data", "seed"),
                         "latent_dim": ("data", "latent_dim")})
    if args.sigma is not None:
        for k in ("sigma_text", "sigma_image", "sigma_point"):
            st.set("data", k, args.sigma)
    cfg = st.synth()
    out = _out_dir(args)
    data = generate_synthetic(cfg)
    write_manifest(data.train, out / "train.jsonl")
    write_manifest(data.test, out / "test.jsonl")
    write_prototypes(data.prototypes, out / "prototypes.json")
    _echo(st, ["data"], out)
    print(f"wrote {len(data.train)} train / {len(data.test)} test records, "
          f"{len(data.classes)} classes to {out}")
    return EXIT_OK


def _train_flags():
    return {"loss": ("train", "loss"), "coeffs": ("train", "coefficients"),
            "freeze": ("train", "freeze"), "epochs": ("train", "epochs"),
            "batch_size": ("train", "batch_size"), "lr": ("train", "lr"),
            "weight_decay": ("train", "weight_decay"), "warmup_ratio": ("train", "warmup_ratio"),
            "seed": ("train", "seed"), "data": ("io", "data_dir"),
            "manifest": ("io", "train_manifest"), "prototypes": ("io", "prototypes")}


def cmd_train(args) -> int:
    st2 = _resolve(args, _train_flags(), REFERENCE_PROFILE if args.profile == "reference" else None)
    cfg = st2.train_config()
    manifest = _path(st2, "train_manifest", "train.jsonl")
    if not manifest.exists():
        raise FileNotFoundError(f"training manifest not found: {manifest}")
    records = read_manifest(manifest)
    classes = None
    proto_path = _path(st2, "prototypes", "prototypes.json") if (
        st2.values["io"]["prototypes"] or st2.values["io"]["data_dir"]) else None
    if proto_path is not None and proto_path.exists():
        classes = list(read_prototypes(proto_path))
    out = _out_dir(args)
    ckpt, history = train(cfg, records, classes)
    ckpt.save(out / "checkpoint.json")
    write_log(history, out / "train_log.jsonl")
    _echo(st2, ["train", "io"], out)
    last = history[-1] if history else {"mean_loss": float("nan"), "logit_scale": ckpt.logit_scale}
    print(f"{cfg.loss}: {cfg.epochs} epoch{'' if cfg.epochs == 1 else 's'}, final loss {last['mean_loss']:.4f}, "
          f"logit scale {last['logit_scale']:.2f} -> {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    st = _resolve(args, {"mode": ("eval", "mode"), "data": ("io", "data_dir"),
                         "manifest": ("io", "test_manifest"), "prototypes": ("io", "prototypes"),
                         "checkpoint": ("io", "checkpoint")})
    mode = st.values["eval"]["mode"]
    modes = MODES if mode == "all" else (mode,)
    if any(m not in MODES for m in modes):
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES} or 'all'")
    ckpt_path = st.values["io"]["checkpoint"]
    if not ckpt_path:
        raise ConfigError("need --checkpoint")
    ckpt = Checkpoint.load(ckpt_path)
    records = read_manifest(_path(st, "test_manifest", "test.jsonl"))
    prototypes = read_prototypes(_path(st, "prototypes", "prototypes.json"))
    reports = evaluate_modes(ckpt, records, prototypes, modes)
    out = _out_dir(args)
    write_reports(reports.values(), out / "metrics.jsonl")
    _echo(st, ["eval", "io"], out)
    print(format_table(reports.values(), title=f"Zero-shot accuracy (%), {len(records)} samples"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    st = _resolve(args, {"seeds": ("check", "seeds"), "d": ("check", "d"),
                         "tol": ("check", "tol_grad"), "epsilon": ("check", "epsilon"),
                         "flip_sign": ("check", "flip_sign")})
    c = st.values["check"]
    b = args.b if args.b is not None else 4
    flip = c["flip_sign"] or None
    rows = []
    failed = []
    for through in (False, True):
        for tag, seed, rep in gradcheck_sweep(range(c["seeds"]), b=b, d=c["d"], epsilon=c["epsilon"],
                                              through_encoders=through, corrupt=flip):
            ok = rep.max_rel_error <= c["tol_grad"]
            where = "encoders" if through else "features"
            rows.append({"variant": tag, "path": where, "seed": seed,
                         "max_rel_error": rep.max_rel_error, "passed": ok})
            print(f"{'PASS' if ok else 'FAIL'}  {tag:<11} {where:<9} seed={seed:<3} "
                  f"max_rel_error={rep.max_rel_error:.3e}")
            if not ok:
                failed.append(rows[-1])
    out = _out_dir(args)
    (out / "gradcheck.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    _echo(st, ["check"], out)
    if failed:
        print(f"{len(failed)} gradient check(s) exceeded tol {c['tol_grad']:g}:", file=sys.stderr)
        for r in failed:
            print(f"  {r['variant']} ({r['path']}) seed {r['seed']}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    st = _resolve(args, {"seeds": ("check", "seeds"), "b": ("check", "b"), "d": ("check", "d"),
                         "tol": ("check", "tol_oracle")})
    c = st.values["check"]
    bs = c["b"] if isinstance(c["b"], list) else [c["b"]]
    worst = {}
    failed = []
    count = 0
    for variant, b, seed, err in oracle_sweep(bs, range(c["seeds"]), c["d"]):
        count += 1
        worst[variant] = max(worst.get(variant, 0.0), err)
        if err > c["tol_oracle"]:
            failed.append((variant, b, seed, err))
    for variant, err in worst.items():
        ok = err <= c["tol_oracle"]
        print(f"{'PASS' if ok else 'FAIL'}  {variant:<18} max |fast - loop| = {err:.3e}")
    print(f"{count} comparisons (b in {bs}, {c['seeds']} seeds, 4 variants)")
    out = _out_dir(args)
    (out / "oracle.json").write_text(json.dumps(
        {"comparisons": count, "worst": worst,
         "failures": [dict(variant=v, b=b, seed=s, error=e) for v, b, s, e in failed]},
        indent=1) + "\n", encoding="utf-8")
    _echo(st, ["check"], out)
    if failed:
        for v, b, s, e in failed:
            print(f"  {v} b={b} seed={s}: {e:.3e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_compare(args) -> int:
    st = _resolve(args, {"seeds": ("compare", "seeds"), "epochs": ("train", "epochs")})
    synth = st.synth()
    base = st.train_config()
    n = st.values["compare"]["seeds"]

    def progress(loss, seed, reports):
        log.info("%s seed %d: %s", loss, seed,
                 ", ".join(f"{m}={r.avg_accuracy:.2f}" for m, r in reports.items()))

    acc = run_comparison(synth, base, seeds=range(n), callback=progress)
    out = _out_dir(args)
    (out / "compare.json").write_text(json.dumps(summarize(acc), indent=1) + "\n", encoding="utf-8")
    _echo(st, ["data", "train", "compare"], out)
    print(format_comparison(acc))
    return EXIT_OK


def cmd_bench(args) -> int:
    st = _resolve(args, {"b": ("bench", "b"), "d": ("bench", "d")})
    c = st.values["bench"]
    bs = c["b"] if isinstance(c["b"], list) else [c["b"]]
    rows = []
    print(f"{'b':>6}{'tensor entries':>16}{'pairwise entries':>18}" +
          "".join(f"{t:>14}" for t in LOSS_TAGS))
    for b in bs:
        rng = np.random.default_rng(b)
        t, i, p = (rng.standard_normal((b, c["d"])) for _ in range(3))
        row = {"b": b}
        for tag in LOSS_TAGS:
            cfg = LossConfig.from_tag(tag)
            start = time.perf_counter()
            for _ in range(c["repeats"]):
                loss_and_grad_features(cfg, t, i, p, np.log(1 / 0.07))
            row[tag] = (time.perf_counter() - start) / c["repeats"]
        rows.append(row)
        print(f"{b:>6}{b ** 3:>16}{3 * b * b:>18}" + "".join(f"{row[t] * 1e3:>12.2f}ms" for t in LOSS_TAGS))
    out = _out_dir(args)
    (out / "bench.json").write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
    _echo(st, ["bench"], out)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------

def _csv(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list:
    return [float(t) for t in _csv(text)]


def _ints(text: str) -> list:
    return [int(t) for t in _csv(text)]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctp", description="Contrastive tensor pre-training toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--config", help="INI file with [data]/[train]/[io]/... sections")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a setting")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 (default) gives bit-reproducible runs")

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/test manifests")
    p.add_argument("--classes", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--sigma", type=float, help="noise level for all three modalities")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train encoders with one loss")
    p.add_argument("--data", help="directory holding train.jsonl and prototypes.json")
    p.add_argument("--manifest", help="training manifest (overrides --data)")
    p.add_argument("--prototypes")
    p.add_argument("--loss", choices=LOSS_TAGS)
    p.add_argument("--coeffs", type=_floats, help="three comma-separated loss weights")
    p.add_argument("--freeze", type=_csv, help="comma-separated encoders to freeze: text,image,point")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=("desk", "reference"), default="desk",
                   help="reference: lr 5e-4, wd 0.2, b 192, 20 epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="zero-shot classification report")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="directory holding test.jsonl and prototypes.json")
    p.add_argument("--manifest", help="test manifest (overrides --data)")
    p.add_argument("--prototypes")
    p.add_argument("--mode", choices=(*MODES, "all"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient sweep")
    p.add_argument("--seeds", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--flip-sign", metavar="PARAM", help="negate one analytic gradient (harness self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", parents=[common], help="vectorized vs loop loss sweep")
    p.add_argument("--seeds", type=int)
    p.add_argument("--b", type=_ints, help="comma-separated batch sizes (<= 16)")
    p.add_argument("--d", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("compare", parents=[common], help="train all four losses and tabulate accuracy")
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", parents=[common], help="time loss and gradient evaluation")
    p.add_argument("--b", type=_ints)
    p.add_argument("--d", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (CTPError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
