"""Project config file and on-disk layout shared by the CLI and the service.

A project is one directory with a declarative `project.json` at its root.
Artifacts land in fixed subdirectories:

    data/       rendered dataset (images/, masks/, manifest.jsonl, split.json)
    artifacts/  generator checkpoint + training traces
    samples/    registered samples: {id}/image.png, latent.gsar, mask.png
    models/     trained segmenters
    distill/    distilled dataset
    reports/    metrics, CSVs and figures
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import GanTrainConfig, load_checkpoint
from .datasets import BASE_COLORS, CLASS_NAMES, SyntheticPartsConfig, load_annotation
from .distillation import AugmentationConfig, AutoShotTrainConfig
from .errors import ProjectError
from .inversion import InversionConfig
from .representation import LayerSelection
from .segmenters import FewShotTrainConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "resolution": 32,
    "n_classes": 4,
    "class_names": list(CLASS_NAMES),
    "palette": (BASE_COLORS * 255).astype(int).tolist(),
    "dataset_root": "data",
    "generator_checkpoint": "artifacts/gan.gsar",
    "layer_selection": {"mode": "all"},
    "target_res": None,
    "dataset": {"size": 2000},
    "gan_train": {"steps": 3000, "batch_size": 32, "lr": 2e-4},
    "fewshot": {"arch": "CNN_DEFAULT", "epochs": 200},
    "autoshot": {"epochs": 12, "batch_size": 16},
    "augmentation": {},
    "inversion": {"steps": 300},
    "distill": {"n": 500},
}


def _merge(defaults, overrides):
    out = dict(defaults)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def init_project(root, overrides: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cfg = _merge(DEFAULT_CONFIG, overrides)
    path = root / "project.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n")
    return path


@dataclass
class Project:
    root: Path
    config: dict

    @classmethod
    def load(cls, config_path) -> "Project":
        config_path = Path(config_path)
        if config_path.is_dir():
            config_path = config_path / "project.json"
        if not config_path.exists():
            raise ProjectError(f"missing artifact: project config ({config_path})",
                               artifact="project config")
        config = _merge(DEFAULT_CONFIG, json.loads(config_path.read_text()))
        return cls(root=config_path.parent.resolve(), config=config)

    # -- paths --
    @property
    def dataset_root(self) -> Path:
        return self.root / self.config["dataset_root"]

    @property
    def checkpoint_path(self) -> Path:
        return self.root / self.config["generator_checkpoint"]

    @property
    def samples_dir(self) -> Path:
        return self.root / "samples"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def distill_dir(self) -> Path:
        return self.root / "distill"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def n_classes(self) -> int:
        return int(self.config["n_classes"])

    @property
    def class_names(self) -> list:
        return list(self.config["class_names"])

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    # -- config builders --
    def layer_selection(self) -> LayerSelection:
        return LayerSelection.from_dict(self.config["layer_selection"])

    def target_res(self):
        value = self.config.get("target_res")
        return tuple(value) if value else None

    def dataset_config(self, **overrides) -> SyntheticPartsConfig:
        cfg = self.config["dataset"]
        return SyntheticPartsConfig(
            resolution=int(self.config["resolution"]),
            n_classes=self.n_classes,
            dataset_size=int(overrides.get("size", cfg.get("size", 2000))),
            rng_seed=int(overrides.get("seed", self.seed)),
            same_color_parts=bool(cfg.get("same_color_parts", False)),
        )

    def gan_config(self, **overrides) -> GanTrainConfig:
        merged = {**self.config["gan_train"], **overrides}
        return GanTrainConfig(**merged)

    def fewshot_config(self, **overrides) -> FewShotTrainConfig:
        merged = {k: v for k, v in {**self.config["fewshot"], **overrides}.items()
                  if k != "arch"}
        return FewShotTrainConfig(**merged)

    def autoshot_config(self, **overrides) -> AutoShotTrainConfig:
        merged = {**self.config["autoshot"], **overrides}
        return AutoShotTrainConfig(**merged)

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(**self.config["augmentation"])

    def inversion_config(self, **overrides) -> InversionConfig:
        merged = {**self.config["inversion"], **overrides}
        return InversionConfig(**merged)

    # -- artifact access with named-missing errors --
    def require_generator(self):
        if not self.checkpoint_path.exists():
            raise ProjectError(
                f"missing artifact: generator checkpoint ({self.checkpoint_path}); "
                "run `ganseg train-gan` first", artifact="generator checkpoint")
        return load_checkpoint(self.checkpoint_path)

    def require_dataset(self):
        manifest = self.dataset_root / "manifest.jsonl"
        if not manifest.exists():
            raise ProjectError(
                f"missing artifact: dataset ({manifest}); run `ganseg make-dataset` "
                "first", artifact="dataset")
        from .datasets import load_dataset_dir
        return load_dataset_dir(self.dataset_root)

    def model_path(self, name: str) -> Path:
        return self.models_dir / f"{name}.gsar"

    def require_model(self, name: str) -> Path:
        path = self.model_path(name)
        if not path.exists():
            raise ProjectError(f"missing artifact: model {name} ({path})",
                               artifact=f"model {name}")
        return path

    # -- sample registry --
    def sample_dir(self, sample_id: int) -> Path:
        return self.samples_dir / f"{int(sample_id):04d}"

    def list_samples(self) -> list:
        if not self.samples_dir.exists():
            return []
        entries = []
        for d in sorted(self.samples_dir.iterdir()):
            if not d.is_dir() or not (d / "image.png").exists():
                continue
            try:
                sid = int(d.name)
            except ValueError:
                continue
            meta = {}
            meta_path = d / "meta.json"
            if meta_path.exists():
                meta = json.loads(meta_path.read_text())
            entries.append({
                "id": sid,
                "has_mask": (d / "mask.png").exists(),
                "has_latent": (d / "latent.gsar").exists(),
                "seed": meta.get("seed"),
            })
        return entries

    def annotated_samples(self) -> list:
        return [s for s in self.list_samples() if s["has_mask"]]

    def load_mask(self, sample_id: int):
        path = self.sample_dir(sample_id) / "mask.png"
        if not path.exists():
            raise ProjectError(f"missing artifact: mask for sample {sample_id}",
                               artifact="mask")
        return load_annotation(path, n_classes=self.n_classes)

    def palette_array(self) -> np.ndarray:
        return np.asarray(self.config["palette"], dtype=np.uint8)
