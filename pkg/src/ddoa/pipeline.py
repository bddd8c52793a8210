"""Dataset generation, training, block inference and DOA evaluation."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import acoustics
from .acoustics import DoaGrid, GeometryError, SceneConfig, SourceSpec, class_to_doa, doa_to_class
from .arch import ArchSpec
from .features import HOP, N_FFT, Dataset, digest_of, phase_maps
from .nn import AdamState, Model, adam_step, bce_loss, init_model, loss_and_grads, model_forward

log = logging.getLogger(__name__)

FS = acoustics.FS
# blocks of 50 frames cover 0.8 s of frame advance at a 16 ms hop
BLOCK_FRAMES = 50


def frames_for_duration(duration: float, fs: float = FS, hop: int = HOP) -> int:
    """Number of frames whose hops tile ``duration`` seconds."""
    return int(round(duration * fs / hop))


def segment_length(n_frames: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    """Samples needed for exactly ``n_frames`` unpadded STFT frames."""
    return (n_frames - 1) * hop + n_fft


# --------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class Condition:
    """One acoustic condition: a room, its RT60 (None = anechoic) and the array pose."""

    room_dims: tuple[float, float, float]
    rt60: float | None
    array_center: tuple[float, float, float]
    array_orientation_deg: float = 0.0


@dataclass(frozen=True)
class ConditionGrid:
    conditions: tuple[Condition, ...]
    distances: tuple[float, ...] = (1.5,)
    snr_db: tuple[float, ...] = (30.0,)
    n_frames: int = 4
    grid: DoaGrid = DoaGrid()
    min_separation: float = 10.0

    @property
    def duration(self) -> float:
        return segment_length(self.n_frames) / FS

    def digest(self, sources_per_scene: int, n_scenes: int, master_seed: int) -> str:
        return digest_of(repr((asdict(self), sources_per_scene, n_scenes, master_seed)))


def _pick_azimuths(rng, grid: DoaGrid, count: int, min_separation: float) -> list[float]:
    classes = grid.classes
    for _ in range(1000):
        chosen = np.sort(rng.choice(classes, size=count, replace=False))
        if count == 1 or np.diff(chosen).min() >= min_separation:
            return [float(a) for a in chosen]
    raise GeometryError(f"cannot place {count} sources {min_separation} deg apart")


def make_scene(grid: ConditionGrid, index: int, sources_per_scene: int, master_seed: int) -> SceneConfig:
    """Scene ``index`` of a generated set; a pure function of its arguments."""
    seed = master_seed + index
    rng = np.random.default_rng(seed)
    cond = grid.conditions[rng.integers(len(grid.conditions))]
    distance = float(grid.distances[rng.integers(len(grid.distances))])
    snr = float(grid.snr_db[rng.integers(len(grid.snr_db))])
    azimuths = _pick_azimuths(rng, grid.grid, sources_per_scene, grid.min_separation)
    return SceneConfig(
        room_dims=cond.room_dims,
        rt60=cond.rt60,
        array_center=cond.array_center,
        array_orientation_deg=cond.array_orientation_deg,
        sources=tuple(SourceSpec(a, distance, "synth") for a in azimuths),
        snr_db=snr,
        seed=seed,
    )


def multi_hot(azimuths, grid: DoaGrid = DoaGrid()) -> np.ndarray:
    label = np.zeros(grid.n_classes, dtype=np.uint8)
    for a in azimuths:
        label[doa_to_class(a, grid)] = 1
    return label


def scene_records(config: SceneConfig, duration: float, grid: DoaGrid = DoaGrid()):
    """Simulate one scene; returns its phase maps ``(n, K, M)`` and multi-hot label."""
    signals = acoustics.scene_signals(config, duration)
    mix = acoustics.simulate_scene(config, signals, min_separation=None)
    return phase_maps(mix), multi_hot([s.azimuth for s in config.sources], grid)


def generate_dataset(
    grid: ConditionGrid, sources_per_scene: int, master_seed: int, n_scenes: int
) -> Dataset:
    """Simulate ``n_scenes`` scenes and label every frame with its active-source classes.

    Scene ``i`` is seeded with ``master_seed + i``, so the output does not
    depend on generation order. Infeasible scenes are skipped and counted.
    """
    if not grid.conditions:
        raise ValueError("condition grid is empty")
    feats, labels, scenes = [], [], []
    skipped = 0
    for i in range(n_scenes):
        config = make_scene(grid, i, sources_per_scene, master_seed)
        try:
            acoustics.check_scene(config, grid.min_separation if sources_per_scene > 1 else None)
        except GeometryError as exc:
            skipped += 1
            log.debug("skipping scene %d: %s", i, exc)
            continue
        maps, label = scene_records(config, grid.duration, grid.grid)
        feats.append(maps.astype(np.float32))
        labels.append(np.repeat(label[None], len(maps), axis=0))
        scenes.append(np.full(len(maps), i, dtype=np.uint32))
    if skipped:
        log.warning("skipped %d infeasible scene(s) of %d", skipped, n_scenes)
    if not feats:
        raise GeometryError("no feasible scenes in the condition grid")
    ds = Dataset(
        np.concatenate(feats),
        np.concatenate(labels),
        np.concatenate(scenes),
        grid.digest(sources_per_scene, n_scenes, master_seed),
    )
    ds.meta.update(skipped=skipped, n_scenes=n_scenes - skipped)
    return ds


# --------------------------------------------------------------------------
# training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    dropout: float = 0.0
    seed: int = 0
    val_fraction: float = 0.1
    dtype: str = "float32"
    monitor_frames: int = 1024


def in_validation(scene: int, seed: int, fraction: float) -> bool:
    """Seed-stable hash split of scene indices."""
    if fraction <= 0:
        return False
    bucket = zlib.crc32(f"{seed}:{scene}".encode()) % 10_000
    return bucket < fraction * 10_000


def split(dataset: Dataset, seed: int, fraction: float) -> tuple[Dataset, Dataset]:
    mask = np.array([in_validation(int(s), seed, fraction) for s in dataset.scene], dtype=bool)
    return dataset.subset(~mask), dataset.subset(mask)


def _inputs(features: np.ndarray, dtype) -> np.ndarray:
    return features[..., None].astype(dtype, copy=False)


def mean_loss(model: Model, features: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    total = 0.0
    for start in range(0, len(features), batch):
        x = _inputs(features[start : start + batch], model.dtype)
        loss, _ = _loss_only(model, x, labels[start : start + batch])
        total += loss * len(x)
    return total / max(len(features), 1)


def _loss_only(model, x, y):
    p = model_forward(model, x)
    return bce_loss(p, np.asarray(y, dtype=p.dtype))


def train(dataset: Dataset, arch: ArchSpec, hyper: TrainConfig | None = None, progress=None) -> Model:
    """Train a model for ``arch`` with Adam on mean BCE.

    ``model.history`` records the per-epoch training and validation losses,
    the loss before and after training on a fixed monitor subset of the
    training frames, and the best validation epoch.
    """
    hyper = hyper or TrainConfig()
    if (dataset.K, dataset.M, dataset.n_classes) != (arch.K, arch.M, arch.n_classes):
        raise ValueError(
            f"dataset shape (K={dataset.K}, M={dataset.M}, I={dataset.n_classes}) does not match "
            f"architecture {arch.name} (K={arch.K}, M={arch.M}, I={arch.n_classes})"
        )
    dtype = np.dtype(hyper.dtype)
    model = init_model(arch, seed=hyper.seed, dropout_rate=hyper.dropout, dtype=dtype)
    train_set, val_set = split(dataset, hyper.seed, hyper.val_fraction)
    if len(train_set) == 0:
        raise ValueError("no training frames left after the validation split")
    rng = np.random.default_rng(hyper.seed)
    monitor = rng.permutation(len(train_set))[: hyper.monitor_frames]
    monitor.sort()
    initial = mean_loss(model, train_set.features[monitor], train_set.labels[monitor])
    history = {"initial_loss": initial, "train_loss": [], "val_loss": [], "n_train": len(train_set), "n_val": len(val_set)}

    params = model.parameters()
    state = AdamState.zeros_like(params)
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(train_set))
        running, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), hyper.batch_size)):
            idx = np.sort(order[start : start + hyper.batch_size])
            x = _inputs(train_set.features[idx], dtype)
            loss, grads = loss_and_grads(model, x, train_set.labels[idx], training=True, rng=rng)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError(
                    f"non-finite loss/gradient at epoch {epoch + 1}, batch {b + 1} "
                    f"(loss={loss}, lr={hyper.lr}, batch_size={hyper.batch_size})"
                )
            adam_step(params, grads, state, lr=hyper.lr)
            running += loss * len(idx)
            seen += len(idx)
        history["train_loss"].append(running / seen)
        if len(val_set):
            history["val_loss"].append(mean_loss(model, val_set.features, val_set.labels))
        if progress is not None:
            progress(epoch + 1, history)
    history["final_loss"] = mean_loss(model, train_set.features[monitor], train_set.labels[monitor])
    if history["val_loss"]:
        best = int(np.argmin(history["val_loss"]))
        history["best_val_loss"] = history["val_loss"][best]
        history["best_epoch"] = best + 1
    model.history = history
    return model


# --------------------------------------------------------------------------
# inference and evaluation


@dataclass
class BlockEstimate:
    averaged_posteriors: np.ndarray
    top_l_classes: list[int]
    L: int


def top_l(posteriors: np.ndarray, L: int) -> list[int]:
    """Indices of the ``L`` largest values; ties go to the lower index."""
    if not 1 <= L <= len(posteriors):
        raise ValueError(f"L={L} outside [1, {len(posteriors)}]")
    return [int(i) for i in np.argsort(-posteriors, kind="stable")[:L]]


def infer_block(model: Model, maps: np.ndarray, L: int, batch: int = 64) -> BlockEstimate:
    """Average frame posteriors over a block of phase maps ``(N, K, M)`` and pick the top L."""
    maps = np.asarray(maps)
    if maps.ndim == 2:
        maps = maps[None]
    if len(maps) < 1:
        raise ValueError("a block needs at least one frame")
    if not 1 <= L <= model.arch.n_classes:
        raise ValueError(f"L={L} outside [1, {model.arch.n_classes}]")
    total = np.zeros(model.arch.n_classes)
    for start in range(0, len(maps), batch):
        total += model_forward(model, _inputs(maps[start : start + batch], model.dtype)).sum(axis=0)
    avg = total / len(maps)
    return BlockEstimate(avg, top_l(avg, L), L)


def match(estimates, truth) -> list[tuple[float, float]]:
    """Pair estimates with true DOAs minimising the total absolute error."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"{len(est)} estimates for {len(tru)} true DOAs")
    rows, cols = linear_sum_assignment(np.abs(est[:, None] - tru[None, :]))
    return [(float(est[r]), float(tru[c])) for r, c in zip(rows, cols)]


@dataclass
class EvalResult:
    mae_degrees: float
    accuracy: float
    block_accuracy: float
    n_estimates: int
    per_scene: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mae_degrees": self.mae_degrees,
            "accuracy": self.accuracy,
            "block_accuracy": self.block_accuracy,
            "n_estimates": self.n_estimates,
            "n_blocks": len(self.per_scene),
        }


def score(pairs_per_block, threshold: float = 5.0, names=None) -> EvalResult:
    """MAE and accuracy from matched ``(estimate, truth)`` pairs of every block.

    An estimate is correct when its matched error is at most ``threshold``;
    ``accuracy`` counts estimates, ``block_accuracy`` blocks whose estimates are
    all correct.
    """
    errors, rows = [], []
    blocks_ok = 0
    for b, pairs in enumerate(pairs_per_block):
        errs = [abs(e - t) for e, t in pairs]
        ok = [err <= threshold for err in errs]
        blocks_ok += all(ok)
        errors += errs
        rows.append(
            {
                "scene": names[b] if names is not None else str(b),
                "truth": [t for _, t in pairs],
                "estimates": [e for e, _ in pairs],
                "mae": float(np.mean(errs)) if errs else 0.0,
                "correct": int(sum(ok)),
            }
        )
    n = len(errors)
    if n == 0:
        raise ValueError("nothing to score")
    correct = sum(r["correct"] for r in rows)
    return EvalResult(float(np.mean(errors)), correct / n, blocks_ok / len(rows), n, rows)


@dataclass
class TestBlock:
    __test__ = False  # not a pytest class

    maps: np.ndarray
    truth: tuple[float, ...]
    name: str = ""


def evaluate(
    model: Model,
    blocks,
    L: int,
    threshold: float = 5.0,
    grid: DoaGrid = DoaGrid(),
    block_level: bool = False,
) -> EvalResult:
    """Block-level DOA estimation and scoring over test blocks.

    With ``block_level`` set, ``accuracy`` reports the fraction of blocks whose
    L estimates are all correct instead of the per-estimate fraction.
    """
    all_pairs, names = [], []
    for i, block in enumerate(blocks):
        if len(block.truth) != L:
            raise ValueError(f"block {block.name or i} has {len(block.truth)} true DOAs, expected {L}")
        est = infer_block(model, block.maps, L)
        all_pairs.append(match([class_to_doa(c, grid) for c in est.top_l_classes], block.truth))
        names.append(block.name or str(i))
    result = score(all_pairs, threshold, names)
    if block_level:
        result.accuracy = result.block_accuracy
    return result


def make_test_blocks(
    grid: ConditionGrid, azimuth_sets, master_seed: int, n_frames: int = BLOCK_FRAMES
) -> list[TestBlock]:
    """One simulated block per (condition, azimuth set) with fresh, seeded signals."""
    blocks = []
    duration = segment_length(n_frames) / FS
    k = 0
    for c_idx, cond in enumerate(grid.conditions):
        for azimuths in azimuth_sets:
            seed = master_seed + k
            k += 1
            rng = np.random.default_rng(seed)
            distance = float(grid.distances[rng.integers(len(grid.distances))])
            snr = float(grid.snr_db[rng.integers(len(grid.snr_db))])
            config = SceneConfig(
                room_dims=cond.room_dims,
                rt60=cond.rt60,
                array_center=cond.array_center,
                array_orientation_deg=cond.array_orientation_deg,
                sources=tuple(SourceSpec(float(a), distance) for a in azimuths),
                snr_db=snr,
                seed=seed,
            )
            maps, _ = scene_records(config, duration, grid.grid)
            name = f"c{c_idx}-" + "-".join(f"{a:g}" for a in azimuths)
            blocks.append(TestBlock(maps.astype(np.float32), tuple(float(a) for a in azimuths), name))
    return blocks


def format_eval(result: EvalResult, digest: str | None = None) -> str:
    lines = [
        f"MAE: {result.mae_degrees:.2f} deg",
        f"Acc: {100 * result.accuracy:.1f} %",
        f"block Acc: {100 * result.block_accuracy:.1f} %",
        f"estimates: {result.n_estimates}",
    ]
    if digest:
        lines.append(f"config digest: {digest}")
    for row in result.per_scene:
        truth = ",".join(f"{t:g}" for t in row["truth"])
        est = ",".join(f"{e:g}" for e in row["estimates"])
        lines.append(
            f"record=scene name={row['scene']} truth={truth} estimates={est} "
            f"mae={row['mae']:.3f} correct={row['correct']}"
        )
    lines.append(
        f"record=total mae={result.mae_degrees:.6f} acc={result.accuracy:.6f} "
        f"block_acc={result.block_accuracy:.6f} n={result.n_estimates}"
    )
    return "\n".join(lines)
