import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from localnoise import __version__
from localnoise.attacks.patch_attack import Patch, PatchLocation, attack_single, display_patch, render_noised
from localnoise.attacks.saliency import saliency_stats
from localnoise.attacks.transfer_attack import train_transfer_patch
from localnoise.diffnet.dataset import Dataset, default_datasets
from localnoise.diffnet.network import Network, default_layers
from localnoise.diffnet.trainer import Trainer
from localnoise.errors import ConfigError, LocalNoiseError
from localnoise.evaluation import (
    INCEPTION_SCALE_LOCATION_ROBUSTNESS,
    class_matrix,
    context_transfer,
    images_by_prediction,
    location_robustness,
    location_sweep,
    shift_sensitivity,
    transfer_eval,
)
from localnoise.helpers.general_utils import configure_logging, corner_locations
from localnoise.pipeline.connectors.file_store import FileStore
from localnoise.pipeline.engine_factory import EvalEngineFactory
from localnoise.pipeline.formats import (
    encode_model,
    encode_patch,
    encode_pgm,
    encode_ppm,
    load_model,
    load_patch,
    save_dataset_ppm,
)
from localnoise.pipeline.schemas import (
    AttackConfig,
    AttackSummary,
    FixConfig,
    PatchSidecar,
    RunConfig,
    RunManifest,
    SweepConfig,
    SweepSummary,
    TrainConfig,
    TransferConfig,
)
from localnoise.settings import Settings, get_settings

LOGGER = logging.getLogger(__name__)

ACTIONS = [
    "train_model",
    "attack_single",
    "attack_transfer",
    "eval_sweep",
    "eval_transfer",
    "class_matrix",
    "saliency",
    "export_dataset",
    "shift_check",
]

MANIFEST_NAME = "manifest.json"


class Experiment:
    """Runs one action against a validated RunConfig and records what it wrote."""

    def __init__(self, cfg: RunConfig, settings: Settings):
        self.cfg = cfg
        self.settings = settings
        self.store = FileStore(cfg.output_dir)
        self.engine = EvalEngineFactory.get_engine(settings)
        self.seeds: Dict[str, int] = {}
        self._datasets: Optional[Tuple[Dataset, Dataset]] = None

    def run(self, action: str) -> RunManifest:
        handler = getattr(self, f"cmd_{action}", None)
        if handler is None:
            raise ConfigError(f"unknown action {action!r}", field="action")

        status = "running"
        LOGGER.info("action %s started, output in %s", action, self.cfg.output_dir)
        try:
            handler()
            manifest = RunManifest(
                action=action,
                package_version=__version__,
                parameters=self.cfg.model_dump(mode="json"),
                settings={"precision": self.settings.precision, "eval_engine": self.settings.eval_engine},
                seeds=self.seeds,
                artifacts=self.store.artifacts(),
            )
            self.store.write_model(MANIFEST_NAME, manifest)
            status = "completed"
            return manifest
        except BaseException:
            status = "failed"
            self.store.rollback()
            raise
        finally:
            LOGGER.info("action %s %s", action, status)

    # inputs

    def datasets(self) -> Tuple[Dataset, Dataset]:
        if self._datasets is None:
            cfg = self.cfg
            self._datasets = default_datasets(
                seed=cfg.seed,
                num_classes=cfg.num_classes,
                image_size=cfg.image_size,
                train_per_class=cfg.train_per_class,
                heldout_per_class=cfg.heldout_per_class,
            )
            self.seeds["dataset"] = cfg.seed
        return self._datasets

    def split(self) -> Dataset:
        train, heldout = self.datasets()
        return train if self.cfg.split == "train" else heldout

    def heldout(self) -> Dataset:
        _, heldout = self.datasets()
        return heldout.subset(range(min(self.cfg.image_count, len(heldout))))

    def image(self, index: Optional[int] = None) -> np.ndarray:
        data = self.split()
        index = self.cfg.image_index if index is None else index
        if index >= len(data):
            raise ConfigError(f"image_index {index} outside the {len(data)}-image {data.split} split", field="image_index")
        return data.images[index]

    def network(self) -> Network:
        if self.cfg.model_path is None:
            raise ConfigError("this action needs a trained model", field="model_path")
        net = load_model(self.cfg.model_path)
        if net.input_shape != (self.cfg.image_size, self.cfg.image_size, 3):
            raise ConfigError(
                f"model expects {net.input_shape} images, image_size is {self.cfg.image_size}", field="image_size"
            )
        return net.astype(self.settings.dtype)

    def target(self, net: Network, fallback: Optional[int] = None) -> int:
        target = self.cfg.target if self.cfg.target is not None else fallback
        if target is None:
            raise ConfigError("a target class is required", field="target")
        if target >= net.num_classes:
            raise ConfigError(f"target {target} outside [0, {net.num_classes})", field="target")
        return target

    def location(self, size: int, corner: Optional[str] = None) -> PatchLocation:
        if self.cfg.location is not None:
            row, col = self.cfg.location
        else:
            corner = self.cfg.corner or corner or "top_left"
            row, col = corner_locations(self.cfg.image_size, self.cfg.image_size, size)[corner]
        loc = PatchLocation(row=row, col=col)
        loc.check(self.cfg.image_size, self.cfg.image_size, size)
        return loc

    def patches(self, require_targets: bool = False) -> List[Tuple[Optional[int], Patch]]:
        """(target from the sidecar or None, patch) for every --patch_paths entry."""
        if not self.cfg.patch_paths:
            raise ConfigError("this action needs at least one patch file", field="patch_paths")
        loaded = []
        for path in self.cfg.patch_paths:
            patch_path = Path(path)
            patch = load_patch(patch_path)
            sidecar_path = patch_path.with_suffix(".json")
            target = None
            if sidecar_path.exists():
                target = PatchSidecar.model_validate_json(sidecar_path.read_text()).target
            elif require_targets:
                raise ConfigError(f"no sidecar with a target next to {path}", field="patch_paths")
            if patch.size != self.cfg.patch_size:
                LOGGER.info("patch %s has size %d, overriding patch_size", path, patch.size)
            loaded.append((target, patch))
        return loaded

    def attack_config(self) -> AttackConfig:
        cfg = self.cfg
        self.seeds["patch_init"] = cfg.seed
        return AttackConfig(
            step_size=cfg.step_size,
            target_confidence=cfg.target_confidence,
            max_iterations=cfg.max_iterations,
            seed=cfg.seed,
            random_init=cfg.random_init,
            pin_reference_to_source=cfg.pin_reference_to_source,
        )

    # actions

    def cmd_train_model(self) -> None:
        cfg = self.cfg
        train, heldout = self.datasets()
        net = Network.build(
            default_layers(cfg.num_classes),
            (cfg.image_size, cfg.image_size, 3),
            cfg.num_classes,
            seed=cfg.seed,
            dtype=self.settings.dtype,
        )
        trainer = Trainer(
            TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, seed=cfg.seed),
            progress=self.settings.progress,
        )
        trained = trainer.fit(net, train, heldout)
        self.seeds.update({"init": cfg.seed, "shuffle": cfg.seed})

        self.store.write_bytes("model.lvnm", encode_model(trained))
        self.store.write_frame("metrics.csv", _frame([m.model_dump() for m in trainer.history]))

    def cmd_attack_single(self) -> None:
        cfg = self.cfg
        net = self.network()
        image = self.image()
        target = self.target(net)
        loc = self.location(cfg.patch_size)
        attack_cfg = self.attack_config()

        result = attack_single(net, image, target, loc, cfg.domain, attack_cfg, size=cfg.patch_size)
        summary = AttackSummary(
            source=result.source,
            target=target,
            domain=cfg.domain,
            location=(loc.row, loc.col),
            size=cfg.patch_size,
            step_size=attack_cfg.resolved_step_size(cfg.domain),
            outcome=result.outcome,
            iterations=result.iterations,
            target_prob=result.target_prob,
            source_prob=result.source_prob,
            predicted=result.predicted,
        )
        self.store.write_bytes("patch.lvpn", encode_patch(result.patch))
        self.store.write_bytes("noised.ppm", encode_ppm(render_noised(image, result.patch, loc)))
        self.store.write_model("result.json", summary)

    def cmd_attack_transfer(self) -> None:
        cfg = self.cfg
        net = self.network()
        train, _ = self.datasets()
        target = self.target(net)
        transfer_cfg = TransferConfig(
            **self.attack_config().model_dump(),
            train_image_count=cfg.train_image_count,
            consecutive_successes=cfg.consecutive_successes,
            success_confidence=cfg.target_confidence,
            max_total_iterations=cfg.max_total_iterations,
            inner_steps=cfg.inner_steps,
        )
        self.seeds["transfer_sampling"] = cfg.seed

        result = train_transfer_patch(
            net, train, target, cfg.domain, transfer_cfg, size=cfg.patch_size, progress=self.settings.progress
        )
        self.store.write_bytes("patch.lvpn", encode_patch(result.patch))
        self.store.write_model("patch.json", result.sidecar())
        self.store.write_bytes("patch_display.ppm", encode_ppm(display_patch(result.patch).values))

    def cmd_eval_sweep(self) -> None:
        net = self.network()
        image = self.image()
        fallback, patch = self.patches()[0]
        target = self.target(net, fallback)
        sweep_cfg = SweepConfig(stride=self.cfg.stride, confidence=self.cfg.target_confidence)

        report = location_sweep(net, image, patch, target, stride=sweep_cfg.stride, engine=self.engine)
        confident, not_source = location_robustness(report)
        rows, cols = report.shape
        self.store.write_frame("sweep.csv", report.to_frame())
        for name, values in report.maps(net.num_classes).items():
            self.store.write_bytes(f"maps/{name}.pgm", encode_pgm(values))
        self.store.write_model(
            "sweep.json",
            SweepSummary(
                source=report.source,
                target=target,
                stride=sweep_cfg.stride,
                grid_rows=rows,
                grid_cols=cols,
                fraction_target_confident=confident,
                fraction_not_source=not_source,
                reference=INCEPTION_SCALE_LOCATION_ROBUSTNESS,
            ),
        )

    def cmd_eval_transfer(self) -> None:
        net = self.network()
        fallback, patch = self.patches()[0]
        target = self.target(net, fallback)
        loc = self.location(patch.size, corner="bottom_right")

        report = transfer_eval(net, self.heldout(), patch, target, loc, engine=self.engine)
        self.store.write_frame("transfer.csv", report.to_frame())
        self.store.write_bytes("transfer.json", _json(report.summary()))

    def cmd_class_matrix(self) -> None:
        net = self.network()
        heldout = self.heldout()
        patches_by_target = {target: patch for target, patch in self.patches(require_targets=True)}
        images_by_source = images_by_prediction(net, heldout.images)
        size = next(iter(patches_by_target.values())).size
        loc = self.location(size, corner="bottom_right")

        matrix = class_matrix(
            net,
            images_by_source,
            patches_by_target,
            loc,
            sources=range(net.num_classes),
            targets=range(net.num_classes),
            engine=self.engine,
        )
        self.store.write_frame("class_matrix.csv", matrix.to_frame())

    def cmd_saliency(self) -> None:
        cfg = self.cfg
        net = self.network()
        patches = self.patches(require_targets=True)
        # without --location or --corner each patch sits in its own bottom-right corner
        loc = self.location(patches[0][1].size) if cfg.location is not None or cfg.corner is not None else None

        stats = saliency_stats(
            net,
            patches,
            self.heldout().images,
            loc,
            FixConfig(step_size=cfg.fix_step_size, max_iterations=cfg.fix_max_iterations, clip=cfg.fix_clip),
            engine=self.engine,
            keep_maps=cfg.saved_maps,
            progress=self.settings.progress,
        )
        self.store.write_bytes("saliency.json", _json(stats.summary()))
        self.store.write_frame("saliency_table.csv", stats.table())
        self.store.write_frame("saliency_records.csv", _frame([r.model_dump(mode="json") for r in stats.records]))
        for k, fix in enumerate(stats.samples):
            normalized, _ = fix.normalized()
            self.store.write_frame(f"maps/fix_{k:02d}.csv", fix.to_frame())
            self.store.write_bytes(f"maps/fix_{k:02d}.pgm", encode_pgm(normalized))
            self.store.write_model(f"maps/fix_{k:02d}.json", fix.sidecar())

    def cmd_export_dataset(self) -> None:
        data = self.split()
        save_dataset_ppm(data, self.store, prefix=f"{data.split}/")

    def cmd_shift_check(self) -> None:
        cfg = self.cfg
        net = self.network()
        data = self.split()
        image = self.image()
        fallback, patch = self.patches()[0]
        target = self.target(net, fallback)
        loc = self.location(patch.size)

        shifts = shift_sensitivity(net, image, patch, loc, target, radius=cfg.shift_radius)
        destination = data.images[(cfg.image_index + 1) % len(data)]
        context = context_transfer(net, image, destination, patch, loc, target, border_fraction=cfg.border_fraction)
        self.store.write_frame("shift.csv", shifts)
        self.store.write_model("context.json", context)


def _frame(rows) -> pd.DataFrame:
    return pd.DataFrame(rows)


def _json(payload: dict) -> bytes:
    return (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Localized adversarial noise experiments.", argument_default=argparse.SUPPRESS
    )
    parser.add_argument("--action", type=str, required=True, choices=ACTIONS, help="Experiment step to run.")
    parser.add_argument("--config", type=str, help="JSON parameters, or a previous run's manifest.json.")
    parser.add_argument("--output_dir", type=str, help="Directory for this run's artifacts.")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--model_path", type=str)
    parser.add_argument("--num_classes", type=int)
    parser.add_argument("--image_size", type=int)
    parser.add_argument("--train_per_class", type=int)
    parser.add_argument("--heldout_per_class", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch_size", type=int)
    parser.add_argument("--learning_rate", type=float)
    parser.add_argument("--split", type=str, choices=["train", "heldout"])
    parser.add_argument("--image_index", type=int)
    parser.add_argument("--image_count", type=int)
    parser.add_argument("--target", type=int)
    parser.add_argument("--patch_size", type=int)
    parser.add_argument("--domain", type=str, choices=["network", "image"])
    parser.add_argument("--location", type=int, nargs=2, metavar=("ROW", "COL"))
    parser.add_argument("--corner", type=str, choices=["top_left", "top_right", "bottom_left", "bottom_right"])
    parser.add_argument("--step_size", type=float)
    parser.add_argument("--target_confidence", type=float)
    parser.add_argument("--max_iterations", type=int)
    parser.add_argument("--random_init", action="store_true")
    parser.add_argument("--pin_reference_to_source", action="store_true")
    parser.add_argument("--train_image_count", type=int)
    parser.add_argument("--consecutive_successes", type=int)
    parser.add_argument("--max_total_iterations", type=int)
    parser.add_argument("--inner_steps", type=int)
    parser.add_argument("--stride", type=int)
    parser.add_argument("--patch_paths", type=str, nargs="+")
    parser.add_argument("--fix_step_size", type=float)
    parser.add_argument("--fix_max_iterations", type=int)
    parser.add_argument("--fix_clip", action="store_true")
    parser.add_argument("--saved_maps", type=int)
    parser.add_argument("--shift_radius", type=int)
    parser.add_argument("--border_fraction", type=float)
    return parser


def build_run_config(args: argparse.Namespace, settings: Settings) -> RunConfig:
    """Defaults <- --config file <- explicit flags."""
    flags = vars(args).copy()
    action = flags.pop("action")
    config_path = flags.pop("config", None)

    merged: Dict[str, object] = {"output_dir": str(Path(settings.output_dir) / action)}
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found at {config_path}", field="config")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}", field="config")
        if isinstance(loaded, dict) and "parameters" in loaded:
            loaded = loaded["parameters"]
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object", field="config")
        merged.update(loaded)
    merged.update(flags)

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise _config_error(exc)


def _config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    field = ".".join(str(part) for part in first["loc"]) or None
    return ConfigError(first["msg"], field=field)


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        settings = get_settings()
        configure_logging(settings.log_level)
        cfg = build_run_config(args, settings)
        Experiment(cfg, settings).run(args.action)
    except LocalNoiseError as exc:
        print(exc.one_line(), file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(_config_error(exc).one_line(), file=sys.stderr)
        return 2
    except Exception as exc:
        LOGGER.exception("action %s crashed", args.action)
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: field=-: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
