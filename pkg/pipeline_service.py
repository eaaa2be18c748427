"""
Command implementations behind the CLI: gen-data, train, sample, ddpo, eval
and the ablation grid. Every command appends one record to the output
directory's run_manifest.jsonl.
"""
import logging
import shutil
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch

import numerics
from ddpo_service import DDPOTrainer, build_reference, image_features
from denoiser import DualBranchDenoiser, ShapeBranchView
from diffusion_service import Trainer, make_schedule, sample_batch
from esgm_service import build_mask_pool, layout_box_condition, load_mask_pool, sample_shape_condition
from exceptions import CheckpointError, ContractError, DatasetIOError, PoolMissError, RunRefusedError
from metrics_service import evaluate_pairs, mmd_permutation_test, report_table
from models.metrics import ShapeFidelityReport
from models.run_config import RunConfig, RunManifest
from models.scene import DatasetManifest, Layout
from models.shapes import MaskPool
from models.training import TrainState
from scene_service import (
    generate_dataset,
    generate_layout,
    load_manifest,
    read_dataset,
    read_layouts,
    tensor_to_u8,
    write_dataset,
    write_layouts,
)
from util.checkpoint import load_checkpoint, save_checkpoint
from util.convert_yaml import config_hash, dump_run_config
from util.digest import file_digest
from util.json_log import append_jsonl, write_json
from util.pnm import read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run_manifest.jsonl"
TRAIN_LOG = "train_log.jsonl"
DDPO_LOG = "ddpo_log.jsonl"
CHECKPOINT = "checkpoint.ckpt"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def prepare_out_dir(out_dir: Path, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise RunRefusedError(f"output directory {out_dir} is not empty (use --force to overwrite)")
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def record_run(
    out_dir: Path,
    command: str,
    config: RunConfig,
    started: str,
    inputs: Optional[Dict[str, str]] = None,
    outputs: Optional[Dict[str, str]] = None,
    summary: Optional[dict] = None,
) -> RunManifest:
    entry = RunManifest(
        command=command,
        config_hash=config_hash(config),
        seed=config.seed,
        started=started,
        finished=_now(),
        inputs=inputs or {},
        outputs=outputs or {},
        summary=summary or {},
    )
    append_jsonl(Path(out_dir) / RUN_MANIFEST, entry.model_dump())
    return entry


def build_model(config: RunConfig) -> DualBranchDenoiser:
    model = DualBranchDenoiser(config.model, seed=config.seed)
    if config.precision == "float64":
        model = model.to(torch.float64)
    return model


def save_training_checkpoint(
    path: Path,
    model: DualBranchDenoiser,
    config: RunConfig,
    state: TrainState,
    optimizer: Optional[numerics.OptimizerState] = None,
    ema: Optional[DualBranchDenoiser] = None,
) -> str:
    arrays = {f"model/{n}": p for n, p in model.named_parameters()}
    if optimizer is not None:
        arrays.update({f"optim/{n}": v for n, v in optimizer.export().items()})
    if ema is not None:
        arrays.update({f"ema/{n}": p for n, p in ema.named_parameters()})
    meta = {
        "format": 1,
        "state": state.model_dump(),
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
    }
    save_checkpoint(path, arrays, meta)
    return file_digest(path)


def _prefixed(arrays: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}


def load_into(module: torch.nn.Module, arrays: Dict[str, torch.Tensor]) -> None:
    params = dict(module.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))[:5]
        raise CheckpointError(f"checkpoint parameters do not match the model (e.g. {missing})")
    with torch.no_grad():
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise CheckpointError(f"parameter {name} has shape {tuple(arrays[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(arrays[name].to(p.dtype))


def load_model(path: Path) -> Tuple[DualBranchDenoiser, RunConfig, Dict[str, torch.Tensor], dict]:
    arrays, meta = load_checkpoint(path)
    if "config" not in meta or "state" not in meta:
        raise CheckpointError(f"checkpoint {path} carries no config snapshot")
    config = RunConfig.model_validate(meta["config"])
    if config_hash(config) != meta.get("config_hash"):
        raise CheckpointError(f"checkpoint {path} config snapshot does not match its hash")
    model = build_model(config)
    load_into(model, _prefixed(arrays, "model/"))
    return model, config, arrays, meta


def cmd_gen_data(config: RunConfig, out_dir: Path, force: bool = False) -> Dict[str, DatasetManifest]:
    """Renders the train and val splits into out_dir/train and out_dir/val."""
    started = _now()
    out_dir = prepare_out_dir(out_dir, force)
    spec = config.dataset.to_scene_spec()
    manifests = {}
    for split, count, seed in (
        ("train", config.dataset.train_count, config.dataset.train_seed),
        ("val", config.dataset.val_count, config.dataset.val_seed),
    ):
        split_seed = numerics.derive_seed(config.seed, seed)
        samples = generate_dataset(spec, count, split_seed, prefix=split)
        manifests[split] = write_dataset(samples, out_dir / split, seed=split_seed, spec=spec)
    record_run(
        out_dir,
        "gen-data",
        config,
        started,
        outputs={split: m.digest for split, m in manifests.items()},
        summary={split: m.count for split, m in manifests.items()},
    )
    return manifests


def cmd_train(
    config: RunConfig,
    data_dir: Path,
    out_dir: Path,
    resume: Optional[Path] = None,
    force: bool = False,
    progress: bool = True,
) -> Path:
    started = _now()
    out_dir = Path(out_dir)
    if resume is None:
        prepare_out_dir(out_dir, force)
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
    manifest, samples = read_dataset(Path(data_dir) / "train")
    model = build_model(config)
    state = None
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("config_hash") != config_hash(config):
            raise RunRefusedError(f"cannot resume from {resume}: config hash differs from the current config")
        load_into(model, _prefixed(arrays, "model/"))
        state = TrainState.model_validate(meta["state"])
    trainer = Trainer(model, samples, config.train, seed=config.seed, state=state)
    if resume is not None:
        trainer.optimizer.load(_prefixed(arrays, "optim/"))
        if trainer.ema is not None:
            load_into(trainer.ema, _prefixed(arrays, "ema/"))
    (out_dir / "config.yaml").write_text(dump_run_config(config))

    def on_step(state: TrainState, breakdown) -> None:
        append_jsonl(out_dir / TRAIN_LOG, {"n": state.n, "epoch": state.epoch, **breakdown.to_record()})
        if state.n % config.train.checkpoint_every == 0 and state.n < state.N:
            save_training_checkpoint(
                out_dir / "checkpoints" / f"step_{state.n:06d}.ckpt",
                model,
                config,
                state,
                trainer.optimizer,
                trainer.ema,
            )

    trainer.run(on_step, progress=progress)
    path = out_dir / CHECKPOINT
    digest = save_training_checkpoint(path, model, config, trainer.state, trainer.optimizer, trainer.ema)
    logger.info("training finished", extra={"n": trainer.state.n, "checkpoint": str(path)})
    record_run(
        out_dir,
        "train",
        config,
        started,
        inputs={"dataset": manifest.digest, **({"resume": file_digest(resume)} if resume else {})},
        outputs={CHECKPOINT: digest},
        summary={"n": trainer.state.n, "N": trainer.state.N},
    )
    return path


def _pool_for(pool_dir: Optional[Path], data_dir: Optional[Path]) -> MaskPool:
    if pool_dir is not None:
        return load_mask_pool(pool_dir)
    if data_dir is None:
        raise ContractError("sampling needs either a mask pool directory or a dataset to build one from")
    return build_mask_pool(load_manifest(Path(data_dir) / "train"))


def render_layouts(
    view: ShapeBranchView,
    layouts: Sequence[Layout],
    config: RunConfig,
    pool: Optional[MaskPool],
    seed: int,
    progress: bool = False,
) -> Tuple[List[Tuple[Layout, torch.Tensor, np.ndarray]], List[dict]]:
    """
    Composes a shape condition per layout (from the pool, or filled boxes when
    no pool is given) and renders them batch by batch. Returns the rendered
    (layout, image, condition) triples and the skipped layouts.
    """
    schedule = make_schedule(config.train.timesteps)
    canvas = config.dataset.canvas_size
    jobs, skipped = [], []
    for index, layout in enumerate(layouts):
        try:
            if pool is None:
                condition = layout_box_condition(layout, canvas)
            else:
                condition = sample_shape_condition(layout, pool, numerics.derive_seed(seed, index, 2))
        except PoolMissError as e:
            skipped.append({"scene_id": layout.scene_id, "category_id": e.category_id, "reason": str(e)})
            continue
        jobs.append((index, layout, condition))

    rendered = []
    size = config.sample.batch_size
    for start in range(0, len(jobs), size):
        chunk = jobs[start:start + size]
        masks = torch.stack([condition.to_tensor() for _, _, condition in chunk])
        images, _ = sample_batch(
            view,
            masks,
            [layout.category_ids for _, layout, _ in chunk],
            schedule,
            config.sample.steps,
            config.sample.sampler,
            [numerics.derive_seed(seed, index, 1) for index, _, _ in chunk],
        )
        for (_, layout, condition), image in zip(chunk, images):
            rendered.append((layout, image, condition.pixels))
        if progress:
            logger.info("sampled", extra={"done": len(rendered), "total": len(jobs)})
    return rendered, skipped


def cmd_sample(
    config: RunConfig,
    checkpoint: Path,
    out_dir: Path,
    layouts_file: Optional[Path] = None,
    random_layouts: Optional[int] = None,
    pool_dir: Optional[Path] = None,
    data_dir: Optional[Path] = None,
    force: bool = False,
    progress: bool = True,
) -> Dict[str, str]:
    started = _now()
    if (layouts_file is None) == (random_layouts is None):
        raise ContractError("give exactly one of a layouts file or a random layout count")
    out_dir = prepare_out_dir(out_dir, force)
    model, trained, _, _ = load_model(checkpoint)
    config = config.model_copy(update={"model": trained.model, "precision": trained.precision, "train": trained.train})
    if layouts_file is not None:
        layouts = read_layouts(layouts_file)
    else:
        spec = config.dataset.to_scene_spec()
        layouts = [
            generate_layout(spec, numerics.derive_seed(config.seed, 100, i), scene_id=f"random-{i:05d}")
            for i in range(random_layouts)
        ]
    pool = _pool_for(pool_dir, data_dir)
    rendered, skipped = render_layouts(model.sampling_view(), layouts, config, pool, config.seed, progress)

    (out_dir / "images").mkdir()
    (out_dir / "conditions").mkdir()
    outputs = {}
    for layout, image, condition in rendered:
        sid = layout.scene_id
        write_ppm(out_dir / "images" / f"{sid}.ppm", tensor_to_u8(image))
        write_pgm(out_dir / "conditions" / f"{sid}.pgm", condition)
        outputs[f"images/{sid}.ppm"] = file_digest(out_dir / "images" / f"{sid}.ppm")
    write_layouts(out_dir / "layouts.jsonl", [layout for layout, _, _ in rendered])
    write_json(out_dir / "samples.json", {"rendered": len(rendered), "skipped": skipped, "files": outputs})
    record_run(
        out_dir,
        "sample",
        config,
        started,
        inputs={"checkpoint": file_digest(checkpoint), "pool": pool.provenance},
        outputs=outputs,
        summary={"rendered": len(rendered), "skipped": len(skipped)},
    )
    return outputs


def _ddpo_conditions(
    layouts: Sequence[Layout], pool: MaskPool, seed: int
) -> Tuple[torch.Tensor, List[List[int]]]:
    masks, ids = [], []
    for index, layout in enumerate(layouts):
        try:
            masks.append(sample_shape_condition(layout, pool, numerics.derive_seed(seed, index, 3)).to_tensor())
        except PoolMissError:
            continue
        ids.append(list(layout.category_ids))
    if not masks:
        raise ContractError("no layout could be conditioned from the mask pool")
    return torch.stack(masks), ids


def cmd_ddpo(
    config: RunConfig,
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    toy_reward: bool = False,
    force: bool = False,
    progress: bool = True,
) -> Path:
    started = _now()
    out_dir = prepare_out_dir(out_dir, force)
    path = out_dir / CHECKPOINT
    ddpo = config.ddpo.model_copy(update={"toy_reward": toy_reward or config.ddpo.toy_reward})
    if ddpo.updates == 0:
        shutil.copyfile(checkpoint, path)
        record_run(
            out_dir,
            "ddpo",
            config,
            started,
            inputs={"checkpoint": file_digest(checkpoint)},
            outputs={CHECKPOINT: file_digest(path)},
            summary={"updates": 0},
        )
        return path

    model, trained, arrays, meta = load_model(checkpoint)
    data_dir = Path(data_dir)
    manifest, samples = read_dataset(data_dir / "train")
    pool = build_mask_pool(manifest)
    masks, category_ids = _ddpo_conditions([s.layout for s in samples], pool, config.seed)
    reference = None
    if not ddpo.toy_reward:
        _, real = read_dataset(data_dir / "val")
        real = real or samples
        reference = build_reference(torch.stack([s.image for s in real]))
    trainer = DDPOTrainer(
        model,
        masks,
        category_ids,
        make_schedule(trained.train.timesteps),
        ddpo,
        reference=reference,
        seed=config.seed,
    )
    records = trainer.run(lambda record: append_jsonl(out_dir / DDPO_LOG, record), progress=progress)

    updated = {f"model/{n}": p for n, p in model.named_parameters()}
    meta = {
        **meta,
        "ddpo_updates": meta.get("ddpo_updates", 0) + len(records),
        "ddpo": ddpo.model_dump(mode="json"),
        "ddpo_reward": "toy" if ddpo.toy_reward else "knn_kl",
    }
    save_checkpoint(path, {**arrays, **updated}, meta)
    record_run(
        out_dir,
        "ddpo",
        config,
        started,
        inputs={"checkpoint": file_digest(checkpoint), "dataset": manifest.digest},
        outputs={CHECKPOINT: file_digest(path)},
        summary={
            "updates": len(records),
            "first_reward": records[0]["mean_reward"],
            "last_reward": records[-1]["mean_reward"],
        },
    )
    return path


def _features_for(directory: Path, scene_ids: Sequence[str]) -> np.ndarray:
    images = [
        torch.from_numpy(read_ppm(Path(directory) / "images" / f"{sid}.ppm").astype(np.float64) / 255.0).permute(2, 0, 1)
        for sid in scene_ids
    ]
    return image_features(torch.stack(images)) if images else np.zeros((0, 64))


def evaluate_directories(
    config: RunConfig,
    generated_dir: Path,
    reference_dir: Path,
    layouts: Sequence[Layout],
    workers: int = 1,
    reference: Literal["image", "mask"] = "image",
) -> ShapeFidelityReport:
    """Edge metrics against the reference images or masks; MMD always compares images."""
    report = evaluate_pairs(generated_dir, reference_dir, layouts, config.eval, workers, reference)
    scene_ids = sorted({row.scene_id for row in report.instances})
    if len(scene_ids) >= 2:
        test = mmd_permutation_test(
            _features_for(generated_dir, scene_ids),
            _features_for(reference_dir, scene_ids),
            config.eval.permutations,
            seed=config.seed,
            bandwidth=config.eval.mmd_bandwidth,
        )
        report.mmd, report.mmd_stderr, report.mmd_p_value = test["mmd"], test["stderr"], test["p_value"]
    return report


def cmd_eval(
    config: RunConfig,
    generated_dir: Path,
    reference_dir: Path,
    layouts_file: Path,
    out_dir: Path,
    workers: Optional[int] = None,
    force: bool = False,
) -> ShapeFidelityReport:
    started = _now()
    out_dir = prepare_out_dir(out_dir, force)
    layouts = read_layouts(layouts_file)
    report = evaluate_directories(config, generated_dir, reference_dir, layouts, workers or config.eval.workers)
    write_json(out_dir / "report.json", report.model_dump(mode="json"))
    (out_dir / "report.txt").write_text(report_table(report))
    record_run(
        out_dir,
        "eval",
        config,
        started,
        inputs={"layouts": file_digest(layouts_file)},
        outputs={"report.json": file_digest(out_dir / "report.json")},
        summary={"instances": report.instance_count, **report.overall.model_dump(exclude={"count"}), "mmd": report.mmd},
    )
    return report


ABLATION_GRID = (
    ("layout-only", False, False),
    ("esgm", True, False),
    ("dcloss", False, True),
    ("esgm+dcloss", True, True),
)


def cmd_ablate(
    config: RunConfig,
    data_dir: Path,
    out_dir: Path,
    with_ddpo: bool = False,
    force: bool = False,
    progress: bool = True,
) -> List[dict]:
    """
    Trains each ESGM x DCLoss variant on the train split, renders the held-out
    val layouts and scores edge overlap against the val ground-truth masks and
    MMD against the val images. The DDPO stage runs when `with_ddpo` or
    `ddpo.enabled` is set.
    """
    started = _now()
    with_ddpo = with_ddpo or config.ddpo.enabled
    out_dir = prepare_out_dir(out_dir, force)
    data_dir = Path(data_dir)
    manifest, samples = read_dataset(data_dir / "train")
    _, held_out = read_dataset(data_dir / "val")
    if not held_out:
        raise DatasetIOError(data_dir / "val", "the ablation needs held-out scenes")
    layouts = [s.layout for s in held_out]
    pool = build_mask_pool(manifest)

    rows = []
    for name, esgm, dcloss in ABLATION_GRID:
        variant = config.model_copy(deep=True)
        variant.train.esgm = esgm
        variant.train.dcloss = dcloss
        model = build_model(variant)
        Trainer(model, samples, variant.train, seed=variant.seed).run(progress=progress)
        if with_ddpo and variant.ddpo.updates > 0:
            masks, ids = _ddpo_conditions([s.layout for s in samples], pool, variant.seed)
            reference = build_reference(torch.stack([s.image for s in held_out]))
            DDPOTrainer(
                model, masks, ids, make_schedule(variant.train.timesteps), variant.ddpo, reference, variant.seed
            ).run(progress=progress)

        rendered, _ = render_layouts(model.sampling_view(), layouts, variant, pool if esgm else None, variant.seed)
        images_dir = out_dir / name / "images"
        images_dir.mkdir(parents=True)
        for layout, image, _ in rendered:
            write_ppm(images_dir / f"{layout.scene_id}.ppm", tensor_to_u8(image))
        report = evaluate_directories(variant, out_dir / name, data_dir / "val", layouts, reference="mask")
        rows.append(
            {
                "variant": name,
                "esgm": esgm,
                "dcloss": dcloss,
                "ddpo": with_ddpo,
                "iou": report.overall.iou,
                "mmd": report.mmd,
                "mmd_stderr": report.mmd_stderr,
            }
        )
        logger.info("ablation variant done", extra=rows[-1])

    write_json(out_dir / "ablation.json", rows)
    record_run(out_dir, "ablate", config, started, inputs={"dataset": manifest.digest}, summary={"rows": rows})
    return rows
