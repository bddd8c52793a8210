"""Command-line interface: ``ddoa {analyze,simulate,featurize,train,eval}``.

Exit codes: 0 success, 2 usage error, 3 architecture validation failure,
4 runtime or data error.

Runs are described by an INI config (``--config``); command-line flags
override it. Every stage writes ``<artifact>.manifest.json`` with the config
digest, seed, input and output SHA-256 digests and package versions. A stage
whose outputs already match their manifest is skipped; one whose input no
longer matches the digest its producer recorded refuses to run.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, acoustics, arch, cost, pipeline
from .features import Dataset, digest_of, phase_maps
from .nn import load_model, save_model

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ddoa")

DEFAULT_CONFIG = """
[run]
seed = 0

[simulate]
n_scenes = 200
sources_per_scene = 1
n_frames = 4
distances = 1.5
snr_db = 30
conditions = anechoic, small, medium

[condition anechoic]
room = 8, 8, 3
rt60 = none
array_center = 4, 4, 1.5

[condition small]
room = 6, 5, 3
rt60 = 0.2
array_center = 3, 2.5, 1.5

[condition medium]
room = 5, 6, 3
rt60 = 0.3
array_center = 2.4, 3.1, 1.4
array_orientation = 30

[train]
arch = d1123
epochs = 8
batch_size = 32
lr = 0.001
dropout = 0.0
val_fraction = 0.1

[eval]
L = 1
threshold = 5
"""


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config and manifests


def load_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cfg.read_string(DEFAULT_CONFIG)
    if path:
        if not Path(path).is_file():
            raise CliError(f"config file {path} does not exist")
        user = configparser.ConfigParser(inline_comment_prefixes=("#",))
        user.read(path, encoding="utf-8")
        # a user-supplied condition list replaces the default conditions
        if user.has_option("simulate", "conditions"):
            for section in [s for s in cfg.sections() if s.startswith("condition ")]:
                cfg.remove_section(section)
        for section in user.sections():
            if not cfg.has_section(section):
                cfg.add_section(section)
            for key, value in user[section].items():
                cfg[section][key] = value
    return cfg


def config_digest(cfg: configparser.ConfigParser, sections) -> str:
    parts = []
    for name in sections:
        if cfg.has_section(name):
            parts.append(f"[{name}]\n" + "".join(f"{k}={v}\n" for k, v in sorted(cfg[name].items())))
    return digest_of("".join(parts))


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(artifact: Path) -> Path:
    return artifact / "manifest.json" if artifact.is_dir() else artifact.with_name(artifact.name + ".manifest.json")


def _versions() -> dict:
    import scipy

    return {"ddoa": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def write_manifest(artifact: Path, stage: str, seed: int, cfg_digest: str, inputs: dict, outputs: dict) -> None:
    manifest = {
        "stage": stage,
        "seed": seed,
        "config_digest": cfg_digest,
        "inputs": inputs,
        "outputs": outputs,
        "versions": _versions(),
    }
    manifest_path(artifact).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def verify_input(artifact: Path, files) -> dict:
    """Digest input files and check them against the producing stage's manifest."""
    if not artifact.exists():
        raise CliError(f"input {artifact} does not exist")
    digests = {str(Path(f).name): file_digest(Path(f)) for f in files}
    mpath = manifest_path(artifact)
    if mpath.is_file():
        recorded = json.loads(mpath.read_text(encoding="utf-8")).get("outputs", {})
        for name, digest in digests.items():
            if name in recorded and recorded[name] != digest:
                raise CliError(
                    f"{name} does not match the digest recorded in {mpath.name}; it was modified after "
                    f"it was produced. Regenerate it or delete the manifest to accept it as-is."
                )
    return digests


def up_to_date(artifact: Path, stage: str, cfg_digest: str, inputs: dict, files) -> bool:
    mpath = manifest_path(artifact)
    if not mpath.is_file() or not all(Path(f).is_file() for f in files):
        return False
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("stage") != stage or manifest.get("config_digest") != cfg_digest or manifest.get("inputs") != inputs:
        return False
    outputs = manifest.get("outputs", {})
    return all(outputs.get(Path(f).name) == file_digest(Path(f)) for f in files)


# --------------------------------------------------------------------------
# helpers


def _floats(text: str):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


def condition_grid(cfg: configparser.ConfigParser) -> pipeline.ConditionGrid:
    sim = cfg["simulate"]
    conditions = []
    for name in [n.strip() for n in sim["conditions"].split(",") if n.strip()]:
        section = f"condition {name}"
        if not cfg.has_section(section):
            raise CliError(f"config names condition {name!r} but has no [{section}] section", EXIT_USAGE)
        c = cfg[section]
        rt60 = c.get("rt60", "none")
        conditions.append(
            pipeline.Condition(
                _floats(c["room"]),
                None if rt60.lower() == "none" else float(rt60),
                _floats(c["array_center"]),
                c.getfloat("array_orientation", 0.0),
            )
        )
    return pipeline.ConditionGrid(
        tuple(conditions),
        distances=_floats(sim["distances"]),
        snr_db=_floats(sim["snr_db"]),
        n_frames=sim.getint("n_frames"),
    )


def resolve_arch(selection: str) -> arch.ArchSpec:
    try:
        return arch.resolve(selection)
    except (KeyError, ValueError) as exc:
        raise CliError(f"unknown architecture {selection!r}: {exc}", EXIT_USAGE) from None


def _require_valid(spec: arch.ArchSpec, strict: bool) -> None:
    report = arch.validate(spec, strict=strict)
    if not report.ok:
        lines = "; ".join(f"{rule}: {msg}" for rule, msg in report.violations)
        raise CliError(f"architecture {spec.name} failed validation: {lines}", EXIT_VALIDATION)


# --------------------------------------------------------------------------
# subcommands


def cmd_analyze(args, cfg) -> int:
    spec = resolve_arch(args.arch or cfg["train"]["arch"])
    _require_valid(spec, args.strict)
    reference = arch.baseline(7, M=spec.M, K=spec.K)
    report = cost.cost_report(spec, reference)
    text = cost.format_table(report)
    if args.records:
        text += "\n" + cost.format_records(report)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    out = Path(args.out)
    seed = cfg["run"].getint("seed")
    if args.scene_file:
        if not Path(args.scene_file).is_file():
            raise CliError(f"scene file {args.scene_file} does not exist")
        scenes = acoustics.read_scene_file(args.scene_file)
        inputs = {Path(args.scene_file).name: file_digest(Path(args.scene_file))}
        digest = digest_of(json.dumps(inputs, sort_keys=True) + cfg["run"]["seed"])
    else:
        grid = condition_grid(cfg)
        sim = cfg["simulate"]
        n_scenes, n_src = sim.getint("n_scenes"), sim.getint("sources_per_scene")
        scenes = []
        for i in range(n_scenes):
            config = pipeline.make_scene(grid, i, n_src, seed)
            try:
                acoustics.check_scene(config, grid.min_separation if n_src > 1 else None)
            except acoustics.GeometryError as exc:
                log.warning("skipping scene %d: %s", i, exc)
                continue
            scenes.append((f"{i:05d}", config, grid.duration))
        inputs = {}
        digest = config_digest(cfg, ["run", "simulate"] + [s for s in cfg.sections() if s.startswith("condition ")])
    files = [out / "scenes.ini"] + [out / f"scene_{name}.wav" for name, _, _ in scenes]
    if not args.force and up_to_date(out, "simulate", digest, inputs, files):
        print(f"{out}: up to date")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    ini = [f"# config digest {digest}\n# seed {seed}\n"]
    for name, config, duration in scenes:
        signals = acoustics.scene_signals(config, duration)
        mix = acoustics.simulate_scene(config, signals).samples
        peak = np.abs(mix).max()
        acoustics.write_wav(out / f"scene_{name}.wav", 0.5 * mix / peak if peak > 0 else mix, acoustics.FS)
        ini.append(acoustics.scene_to_ini(name, config, duration))
    (out / "scenes.ini").write_text("\n".join(ini), encoding="utf-8")
    write_manifest(out, "simulate", seed, digest, inputs, {f.name: file_digest(f) for f in files})
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def _scene_blocks(scene_dir: Path):
    scene_ini = scene_dir / "scenes.ini"
    if not scene_ini.is_file():
        raise CliError(f"{scene_dir} has no scenes.ini; run `ddoa simulate` first")
    scenes = acoustics.read_scene_file(scene_ini)
    files = [scene_ini] + [scene_dir / f"scene_{name}.wav" for name, _, _ in scenes]
    digests = verify_input(scene_dir, files)
    for path in files[1:]:
        if not path.is_file():
            raise CliError(f"missing scene audio {path}")
    return scenes, files, digests


def cmd_featurize(args, cfg) -> int:
    scene_dir, out = Path(args.scenes), Path(args.out)
    scenes, files, inputs = _scene_blocks(scene_dir)
    digest = digest_of(json.dumps(inputs, sort_keys=True))
    if not args.force and up_to_date(out, "featurize", digest, inputs, [out]):
        print(f"{out}: up to date")
        return EXIT_OK
    grid = acoustics.DoaGrid()
    feats, labels, index = [], [], []
    for i, (name, config, _) in enumerate(scenes):
        samples, fs = acoustics.read_wav(scene_dir / f"scene_{name}.wav")
        maps = phase_maps(samples)
        feats.append(maps)
        labels.append(np.repeat(pipeline.multi_hot([s.azimuth for s in config.sources], grid)[None], len(maps), 0))
        index.append(np.full(len(maps), i))
    if not feats:
        raise CliError("no scenes to featurize")
    ds = Dataset(np.concatenate(feats), np.concatenate(labels), np.concatenate(index), digest)
    ds.save(out)
    seed = cfg["run"].getint("seed")
    write_manifest(out, "featurize", seed, digest, inputs, {out.name: file_digest(out)})
    print(f"wrote {len(ds)} phase maps from {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds_path, out = Path(args.dataset), Path(args.out)
    inputs = verify_input(ds_path, [ds_path])
    t = cfg["train"]
    spec = resolve_arch(args.arch or t["arch"])
    _require_valid(spec, args.strict)
    seed = cfg["run"].getint("seed")
    hyper = pipeline.TrainConfig(
        lr=t.getfloat("lr"),
        batch_size=t.getint("batch_size"),
        epochs=t.getint("epochs"),
        dropout=t.getfloat("dropout"),
        seed=seed,
        val_fraction=t.getfloat("val_fraction"),
    )
    digest = digest_of(repr(hyper) + arch.arch_to_text(spec) + json.dumps(inputs, sort_keys=True))
    if not args.force and up_to_date(out, "train", digest, inputs, [out]):
        print(f"{out}: up to date")
        return EXIT_OK
    ds = Dataset.load(ds_path)

    def progress(epoch, history):
        val = history["val_loss"][-1] if history["val_loss"] else float("nan")
        print(f"epoch {epoch}/{hyper.epochs} train_loss={history['train_loss'][-1]:.5f} val_loss={val:.5f}", flush=True)

    try:
        model = pipeline.train(ds, spec, hyper, progress)
    except pipeline.TrainingError as exc:
        raise CliError(str(exc)) from None
    except ValueError as exc:
        raise CliError(f"cannot train {spec.name} on {ds_path}: {exc}") from None
    h = model.history
    extra = {
        "config_digest": digest,
        "seed": str(seed),
        "dataset_digest": inputs[ds_path.name],
        "initial_loss": repr(h["initial_loss"]),
        "final_loss": repr(h["final_loss"]),
    }
    if "best_val_loss" in h:
        extra["best_val_loss"] = repr(h["best_val_loss"])
    save_model(model, out, extra)
    write_manifest(out, "train", seed, digest, inputs, {out.name: file_digest(out)})
    print(f"wrote {out} (initial loss {h['initial_loss']:.5f}, final loss {h['final_loss']:.5f})")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    model_path, scene_dir = Path(args.model), Path(args.scenes)
    inputs = verify_input(model_path, [model_path])
    scenes, _, scene_digests = _scene_blocks(scene_dir)
    inputs.update(scene_digests)
    e = cfg["eval"]
    L = args.L if args.L is not None else e.getint("L")
    threshold = e.getfloat("threshold")
    try:
        model, _ = load_model(model_path)
    except ValueError as exc:
        raise CliError(f"cannot load {model_path}: {exc}") from None
    blocks = []
    for name, config, _ in scenes:
        samples, _ = acoustics.read_wav(scene_dir / f"scene_{name}.wav")
        blocks.append(pipeline.TestBlock(phase_maps(samples), tuple(s.azimuth for s in config.sources), name))
    try:
        result = pipeline.evaluate(model, blocks, L, threshold, block_level=args.block_level)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    digest = digest_of(json.dumps(inputs, sort_keys=True) + f"L={L} threshold={threshold} block={args.block_level}")
    text = pipeline.format_eval(result, digest)
    print(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n", encoding="utf-8")
        write_manifest(out, "eval", cfg["run"].getint("seed"), digest, inputs, {out.name: file_digest(out)})
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddoa", description="Dilated-CNN DOA estimation toolkit")
    parser.add_argument("--config", help="INI run config; flags override its values")
    parser.add_argument("--seed", type=int, help="master seed (overrides [run] seed)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="FLOP / parameter report for an architecture")
    p.add_argument("--arch", help="baseline:N, f2342, d1123, d133 or a descriptor file")
    p.add_argument("--strict", action="store_true", help="enforce the dilation design rules")
    p.add_argument("--records", action="store_true", help="also print key=value records")
    p.add_argument("--out", help="also write the report to this file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="simulate scenes to multichannel WAV files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scene-file", help="explicit INI scene list instead of the config's condition grid")
    p.add_argument("--n-scenes", type=int, help="override [simulate] n_scenes")
    p.add_argument("--sources", type=int, help="override [simulate] sources_per_scene")
    p.add_argument("--n-frames", type=int, help="override [simulate] n_frames")
    p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("featurize", help="phase maps and labels from simulated scenes")
    p.add_argument("--scenes", required=True, help="directory written by `simulate`")
    p.add_argument("--out", required=True, help="dataset file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--arch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="block-level MAE / accuracy on simulated scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", required=True, help="directory written by `simulate`")
    p.add_argument("--L", type=int, help="number of sources per block")
    p.add_argument("--block-level", action="store_true", help="count a block correct only if all L estimates are")
    p.add_argument("--out", help="report file")
    p.set_defaults(func=cmd_eval)
    return parser


def _apply_overrides(args, cfg) -> None:
    if args.seed is not None:
        cfg["run"]["seed"] = str(args.seed)
    for flag, section, key in [
        ("n_scenes", "simulate", "n_scenes"),
        ("sources", "simulate", "sources_per_scene"),
        ("n_frames", "simulate", "n_frames"),
        ("epochs", "train", "epochs"),
        ("lr", "train", "lr"),
        ("batch_size", "train", "batch_size"),
        ("dropout", "train", "dropout"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = str(value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        _apply_overrides(args, cfg)
        return args.func(args, cfg)
    except CliError as exc:
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        print(f"ddoa: error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"ddoa: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
