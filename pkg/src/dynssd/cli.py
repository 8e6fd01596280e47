"""Command-line entry point: every stage of the experiment from one config file.

Exit codes: 0 ok, 2 config error (or a completed stage would be
overwritten without --force), 3 missing upstream stage, 4 data or I/O
error (including a busy work directory), 5 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import hashlib
import json
import logging
import os
import shutil
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import __version__
from . import config as C
from .checkpoint import CheckpointError
from .classifier import build_classifier_dataset, train_classifier
from .evaluation import (
    AlignmentError,
    ablation_csv,
    ablation_table,
    compare_runs,
    comparison_text,
    plot_csv,
    report_csv,
    report_text,
    stratified_report,
)
from .imaging import ImageFormatError
from .pipeline import LazyGenerator, Models, read_results, run_split
from .proposer import Proposer, ProposerConfig, TrainSchedule, propose, train_proposer
from .srgan import GanLossWeights, GanSchedule, GeneratorConfig, PatchCNN, PatchCNNConfig, polyp_patches, train_gan
from .classifier import ClassifierSchedule
from .synth import DatasetManifest, SceneConfig, item_seed, load_frames, stratify, write_split

log = logging.getLogger("dynssd")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
SPLITS = ("train", "test", "test75")
MARKER = "DONE.json"
WORKDIR_ENV = "DYNSSD_WORKDIR"
STAGE_COMMANDS = {"data": "gen-data", "proposer": "train-proposer", "gan": "train-gan", "classifier": "train-classifier"}


class CliError(Exception):
    code = EXIT_DATA


class StageConflict(CliError):
    code = EXIT_CONFIG


class MissingDependency(CliError):
    code = EXIT_MISSING


class DataError(CliError):
    code = EXIT_DATA


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_seed(master: int, stage: str) -> int:
    return item_seed(master, zlib.crc32(stage.encode())) & 0x7FFFFFFF


def scene_config(image_size: int) -> SceneConfig:
    """Default scene look with polyp radii scaled to the frame size."""
    s = image_size / 128.0
    return SceneConfig(image_size=image_size, radius_range=(8.0 * s, 36.0 * s))


# --- work directory ---------------------------------------------------------------


class Workdir:
    def __init__(self, root: Path):
        self.root = Path(root)

    def stage_dir(self, name: str) -> Path:
        return self.root / name

    def marker(self, name: str) -> dict | None:
        path = self.stage_dir(name) / MARKER
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt stage marker {path}: {exc}") from exc

    def require(self, name: str, hint: str) -> dict:
        m = self.marker(name)
        if m is None:
            raise MissingDependency(f"stage '{name}' has not completed; run `dynssd {hint}` first")
        return m

    def digest(self, name: str) -> str:
        if name.startswith("run-"):
            split, mode = name[4:].split("-", 1)
            hint = f"run --split {split} --mode {mode}"
        else:
            hint = STAGE_COMMANDS.get(name, name)
        m = self.require(name, hint)
        return hashlib.sha256(json.dumps(m["outputs"], sort_keys=True).encode()).hexdigest()

    def check_layout(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / "layout.json"
        if path.exists():
            got = json.loads(path.read_text()).get("layout_version")
            if got != C.LAYOUT_VERSION:
                raise DataError(f"{self.root} uses work-directory layout {got}, this build expects {C.LAYOUT_VERSION}")
        else:
            path.write_text(json.dumps({"layout_version": C.LAYOUT_VERSION}) + "\n")

    @contextlib.contextmanager
    def lock(self):
        self.check_layout()
        fh = open(self.root / ".lock", "w")
        try:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError as exc:
                raise DataError(f"work directory {self.root} is in use by another dynssd process") from exc
            yield self
        finally:
            fh.close()

    def run_stage(self, name: str, fingerprint: dict, force: bool, body: Callable[[Path], None]) -> bool:
        """Run ``body`` unless an identical completed stage exists; returns True if it ran."""
        existing = self.marker(name)
        out = self.stage_dir(name)
        if existing is not None:
            intact = all(
                (out / f).exists() and sha256_file(out / f) == h for f, h in existing.get("outputs", {}).items()
            )
            if existing.get("fingerprint") == fingerprint and intact and not force:
                log.info("stage %s is up to date", name)
                return False
            if not force:
                raise StageConflict(
                    f"stage '{name}' already completed with different inputs or modified outputs; "
                    "rerun with --force to overwrite"
                )
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log.info("running stage %s", name)
        body(out)
        outputs = {
            str(p.relative_to(out)): sha256_file(p) for p in sorted(out.rglob("*")) if p.is_file() and p.name != MARKER
        }
        marker = {"stage": name, "layout_version": C.LAYOUT_VERSION, "fingerprint": fingerprint, "outputs": outputs}
        (out / MARKER).write_text(json.dumps(marker, indent=1, sort_keys=True) + "\n")
        return True


# --- context ----------------------------------------------------------------------


@dataclass
class Context:
    cfg: C.ExperimentConfig
    wd: Workdir
    force: bool

    def manifest(self, split: str) -> DatasetManifest:
        self.wd.require("data", "gen-data")
        path = self.wd.stage_dir("data") / split / "manifest.json"
        try:
            return DatasetManifest.load(path)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot load manifest {path}: {exc}") from exc

    def fp(self, *sections: str, upstream: tuple[str, ...] = ()) -> dict:
        return {
            "config": self.cfg.section_hash(*sections),
            "upstream": {u: self.wd.digest(u) for u in upstream},
        }

    def proposer_config(self) -> ProposerConfig:
        p, pl = self.cfg.proposer, self.cfg.pipeline
        return ProposerConfig(
            image_size=self.cfg.dataset.image_size,
            channels=p.channels,
            s_min=p.s_min,
            s_max=p.s_max,
            aspect_ratios=p.aspect_ratios,
            match_iou=p.match_iou,
            negative_ratio=p.negative_ratio,
            confidence=pl.confidence_threshold,
            nms_iou=pl.nms_threshold,
            max_proposals=pl.max_proposals,
        )

    def generator_config(self) -> GeneratorConfig:
        g = self.cfg.gan
        return GeneratorConfig(
            input_size=self.cfg.pipeline.generator_input, residual_blocks=g.residual_blocks, base_channels=g.base_channels
        )

    def patch_config(self) -> PatchCNNConfig:
        return PatchCNNConfig(input_size=self.cfg.pipeline.classifier_input, channels=self.cfg.gan.disc_channels)

    def load_proposer(self) -> Proposer:
        self.wd.require("proposer", "train-proposer")
        model = Proposer(self.proposer_config())
        model.load(self.wd.stage_dir("proposer") / "proposer.ckpt")
        model.freeze()
        return model

    def lazy_generator(self) -> LazyGenerator:
        self.wd.require("gan", "train-gan")
        return LazyGenerator.from_checkpoint(self.wd.stage_dir("gan") / "generator.ckpt", self.generator_config())

    def load_classifier(self) -> PatchCNN:
        self.wd.require("classifier", "train-classifier")
        model = PatchCNN(self.patch_config())
        model.load(self.wd.stage_dir("classifier") / "classifier.ckpt")
        model.freeze()
        return model

    def training_frames(self):
        return load_frames(self.manifest("train"), (self.cfg.dataset.train_duplicate_scale,))


# --- stages -------------------------------------------------------------------------


def cmd_gen_data(ctx: Context, args) -> None:
    d = ctx.cfg.dataset
    seed = stage_seed(ctx.cfg.seed, "data")
    scene = scene_config(d.image_size)
    try:
        scene.validate()
    except ValueError as exc:
        raise C.ConfigError(f"dataset.image_size: {exc}") from exc

    def body(out: Path):
        write_split(out / "train", "train", seed, d.train_positive, d.train_negative, scene)
        write_split(out / "test", "test", seed, d.test_positive, d.test_negative, scene)
        write_split(out / "test75", "test75", seed, d.test_positive, d.test_negative, scene, d.scale_factor)

    ctx.wd.run_stage("data", ctx.fp("dataset"), ctx.force, body)


def cmd_train_proposer(ctx: Context, args) -> None:
    p = ctx.cfg.proposer
    fingerprint = ctx.fp("dataset", "proposer", "pipeline", upstream=("data",))

    def body(out: Path):
        frames = ctx.training_frames()
        rows = []

        def on_epoch(epoch, loss, model):
            rows.append((epoch, loss))
            model.save(out / "proposer.ckpt")

        model, _ = train_proposer(
            frames,
            ctx.proposer_config(),
            TrainSchedule(epochs=p.epochs, batch_size=p.batch_size, lr=p.lr),
            seed=stage_seed(ctx.cfg.seed, "proposer"),
            on_epoch=on_epoch,
        )
        model.save(out / "proposer.ckpt")
        with open(out / "proposer_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            w.writerows((e, f"{v:.10g}") for e, v in rows)

    ctx.wd.run_stage("proposer", fingerprint, ctx.force, body)


def cmd_train_gan(ctx: Context, args) -> None:
    g = ctx.cfg.gan
    fingerprint = ctx.fp("dataset", "gan", "pipeline", upstream=("data",))

    def body(out: Path):
        seed = stage_seed(ctx.cfg.seed, "gan")
        pl = ctx.cfg.pipeline
        try:
            patches = polyp_patches(ctx.training_frames(), pl.classifier_input, g.patches, seed, min_side=pl.generator_input)
        except ValueError as exc:
            raise DataError(f"cannot build GAN patches: {exc}") from exc
        train_gan(
            patches,
            ctx.generator_config(),
            ctx.patch_config(),
            GanLossWeights(g.lambda_adv, g.lambda_pixel, g.lambda_cycle),
            GanSchedule(epochs=g.epochs, batch_size=g.batch_size, lr_g=g.lr_g, lr_d=g.lr_d, cosine_decay=g.cosine_decay),
            seed=seed,
            out_dir=out,
        )

    ctx.wd.run_stage("gan", fingerprint, ctx.force, body)


def cmd_train_classifier(ctx: Context, args) -> None:
    c = ctx.cfg.classifier
    fingerprint = ctx.fp("dataset", "gan", "classifier", "pipeline", upstream=("data", "proposer", "gan"))

    def body(out: Path):
        seed = stage_seed(ctx.cfg.seed, "classifier")
        pl = ctx.cfg.pipeline
        extra = None
        if c.hard_negatives:
            proposer = ctx.load_proposer()

            def extra(img, ann):
                return [
                    p.box for p in propose(proposer, img, pl.confidence_threshold, pl.nms_threshold, pl.max_proposals)
                ]

        gen = ctx.lazy_generator()
        try:
            data = build_classifier_dataset(
                ctx.manifest("train"),
                gen,
                pl,
                seed,
                jitters_per_box=c.jitters_per_box,
                extra_negatives=extra,
                frames=ctx.training_frames(),
            )
        except ValueError as exc:
            raise DataError(f"cannot build classifier dataset: {exc}") from exc
        if getattr(args, "dump_patches", False):
            data.dump(out / "patches")
        train_classifier(
            data,
            ctx.patch_config(),
            ClassifierSchedule(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr),
            seed=seed,
            out_dir=out,
        )

    ctx.wd.run_stage("classifier", fingerprint, ctx.force, body)


def run_name(split: str, mode: str) -> str:
    return f"run-{split}-{mode}"


def ensure_run(ctx: Context, split: str, mode: str) -> Path:
    name = run_name(split, mode)
    fingerprint = ctx.fp("pipeline", upstream=("data", "proposer", "gan", "classifier"))

    def body(out: Path):
        models = Models(ctx.load_proposer(), ctx.load_classifier(), ctx.lazy_generator())
        run_split(models, ctx.manifest(split), ctx.cfg.pipeline.with_mode(mode), out / "results.jsonl")

    ctx.wd.run_stage(name, fingerprint, ctx.force, body)
    return ctx.wd.stage_dir(name) / "results.jsonl"


def cmd_run(ctx: Context, args) -> None:
    mode = args.mode or ctx.cfg.pipeline.upsampling_mode
    path = ensure_run(ctx, args.split, mode)
    print(f"results: {path}")


def load_report(ctx: Context, split: str, mode: str):
    name = run_name(split, mode)
    if ctx.wd.marker(name) is None:
        raise MissingDependency(f"no results for split {split!r} in {mode} mode; run `dynssd run --split {split} --mode {mode}` first")
    manifest = ctx.manifest(split)
    results = read_results(ctx.wd.stage_dir(name) / "results.jsonl")
    bands = stratify(manifest.annotations(), ctx.cfg.dataset.bands)
    return stratified_report(results, manifest, bands, ctx.cfg.eval.iou_match)


def cmd_evaluate(ctx: Context, args) -> None:
    mode = args.mode or ctx.cfg.pipeline.upsampling_mode
    name = f"eval-{args.split}-{mode}"
    report = load_report(ctx, args.split, mode)
    fingerprint = ctx.fp("eval", "dataset", upstream=(run_name(args.split, mode),))

    def body(out: Path):
        (out / "report.txt").write_text(report_text(report, f"split {args.split}, {mode} upsampling"))
        (out / "report.csv").write_text(report_csv(report))
        (out / "plot.csv").write_text(plot_csv({mode: report}))

    ctx.wd.run_stage(name, fingerprint, ctx.force, body)
    print((ctx.wd.stage_dir(name) / "report.txt").read_text(), end="")


def parse_run_ref(ref: str) -> tuple[str, str]:
    split, _, mode = ref.partition(":")
    if split not in SPLITS or mode not in ("generator", "bicubic"):
        raise C.ConfigError(f"run reference must look like SPLIT:MODE (e.g. test75:bicubic), got {ref!r}")
    return split, mode


def cmd_compare(ctx: Context, args) -> None:
    (sa, ma), (sb, mb) = parse_run_ref(args.a), parse_run_ref(args.b)
    ra, rb = load_report(ctx, sa, ma), load_report(ctx, sb, mb)
    try:
        rows = compare_runs(ra, rb)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    name = f"compare-{sa}-{ma}-vs-{sb}-{mb}"
    fingerprint = ctx.fp("eval", "dataset", upstream=(run_name(sa, ma), run_name(sb, mb)))

    def body(out: Path):
        (out / "comparison.txt").write_text(comparison_text(rows, f"{sa}:{ma}", f"{sb}:{mb}"))
        (out / "plot.csv").write_text(plot_csv({f"{sa}:{ma}": ra, f"{sb}:{mb}": rb}))

    ctx.wd.run_stage(name, fingerprint, ctx.force, body)
    print((ctx.wd.stage_dir(name) / "comparison.txt").read_text(), end="")


def cmd_ablate(ctx: Context, args) -> None:
    split = "test75"
    for mode in ("generator", "bicubic"):
        ensure_run(ctx, split, mode)
    gen_rep, bic_rep = load_report(ctx, split, "generator"), load_report(ctx, split, "bicubic")
    fingerprint = ctx.fp("eval", "dataset", upstream=(run_name(split, "generator"), run_name(split, "bicubic")))
    rows = [("Generator", gen_rep.overall), ("Bicubic Interpolation", bic_rep.overall)]

    def body(out: Path):
        (out / "ablation.txt").write_text(ablation_table(rows))
        (out / "ablation.csv").write_text(ablation_csv(rows))
        (out / "comparison.txt").write_text(comparison_text(compare_runs(bic_rep, gen_rep), "bicubic", "generator"))
        (out / "plot.csv").write_text(plot_csv({"generator": gen_rep, "bicubic": bic_rep}))
        (out / "report-generator.txt").write_text(report_text(gen_rep, "75%-scaled test split, generator"))
        (out / "report-bicubic.txt").write_text(report_text(bic_rep, "75%-scaled test split, bicubic"))

    ctx.wd.run_stage("ablate", fingerprint, ctx.force, body)
    print((ctx.wd.stage_dir("ablate") / "ablation.txt").read_text(), end="")


def cmd_all(ctx: Context, args) -> None:
    cmd_gen_data(ctx, args)
    cmd_train_proposer(ctx, args)
    cmd_train_gan(ctx, args)
    cmd_train_classifier(ctx, args)
    mode = ctx.cfg.pipeline.upsampling_mode
    ensure_run(ctx, "test", mode)
    cmd_evaluate(ctx, argparse.Namespace(split="test", mode=mode))
    cmd_ablate(ctx, args)


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic train, test and 75%-scaled test splits"),
    "train-proposer": (cmd_train_proposer, "train the single-shot region proposer"),
    "train-gan": (cmd_train_gan, "adversarially train the x2 super-resolution generator"),
    "train-classifier": (cmd_train_classifier, "build the patch set and train the classifier"),
    "run": (cmd_run, "run the full detector over a split and write results JSON lines"),
    "evaluate": (cmd_evaluate, "score a run: size-stratified sensitivity and specificity"),
    "compare": (cmd_compare, "per-band deltas between two evaluated runs"),
    "ablate": (cmd_ablate, "generator vs bicubic upsampling on the 75%-scaled test split"),
    "all": (cmd_all, "the whole chain, from data generation to the ablation table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynssd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dynssd {__version__}")
    parser.add_argument("--print-default-config", action="store_true", help="print the default config as TOML and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default="dynssd.toml", help="experiment config file (default: %(default)s)")
    common.add_argument("--force", action="store_true", help="overwrite completed stage outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name in ("run", "evaluate"):
            sp.add_argument("--split", choices=SPLITS, default="test")
            sp.add_argument("--mode", choices=("generator", "bicubic"), help="override pipeline.upsampling_mode")
        if name == "compare":
            sp.add_argument("a", help="baseline run as SPLIT:MODE")
            sp.add_argument("b", help="other run as SPLIT:MODE")
        if name in ("train-classifier", "all"):
            sp.add_argument("--dump-patches", action="store_true", help="also write the patch set as PPM + index.json")
    return parser


def resolve_workdir(cfg: C.ExperimentConfig, config_path: Path) -> Path:
    env = os.environ.get(WORKDIR_ENV)
    if env:
        return Path(env)
    wd = Path(cfg.paths.workdir)
    return wd if wd.is_absolute() else config_path.parent / wd


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_default_config:
        sys.stdout.write(C.dumps(C.ExperimentConfig()))
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr
    )
    try:
        cfg = C.load(args.config)
        wd = Workdir(resolve_workdir(cfg, Path(args.config)))
        with wd.lock():
            COMMANDS[args.command][0](Context(cfg, wd, args.force), args)
    except C.ConfigError as exc:
        print(f"dynssd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"dynssd: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"dynssd: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ImageFormatError, CheckpointError, AlignmentError, OSError) as exc:
        print(f"dynssd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
