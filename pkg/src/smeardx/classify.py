"""Layer 2: crop extraction, feature embedding, and stage classification.

Cells are cropped from the slide, stretched to a fixed square size, embedded
as a 2048-entry feature vector by a pluggable backend, and classified into
the four parasite stages by a four-layer fully-connected network trained with
multiclass cross-entropy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ValidationError
from .ingest import STAGE_CLASSES, BoundingBox
from .util import array_digest, fingerprint

FEATURE_DIM = 2048
DEFAULT_CROP_SIZE = 224

# Four weight layers; the output width equals the number of stage classes.
LAYER_SIZES = (FEATURE_DIM, 512, 128, 32, len(STAGE_CLASSES))


@dataclass(frozen=True)
class CellCrop:
    """Square cell image at the configured target size, values in [0, 1]."""

    pixels: np.ndarray
    source_image_id: str
    source_bbox: BoundingBox

    def __post_init__(self) -> None:
        p = self.pixels
        if not (isinstance(p, np.ndarray) and p.ndim == 3 and p.shape[2] == 3):
            raise ValidationError("crop pixels must be an SxSx3 array")
        if p.shape[0] != p.shape[1]:
            raise ValidationError(f"crop must be square, got {p.shape[:2]}")
        if not np.isfinite(p).all():
            raise ValidationError("crop contains non-finite values")
        if p.min() < 0.0 or p.max() > 1.0:
            raise ValidationError("crop values must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def extract_crop(
    image: np.ndarray,
    bbox: BoundingBox,
    target: int = DEFAULT_CROP_SIZE,
    image_id: str = "",
) -> CellCrop:
    """Crop a cell region and stretch it bilinearly to target x target.

    The box is clipped to the image first; a box entirely outside raises a
    validation error. Aspect ratio is not preserved.
    """
    if target <= 0:
        raise ValidationError(f"target size must be positive, got {target}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("expected an HxWx3 image")
    height, width = image.shape[:2]
    clipped = bbox.clip(height, width)
    if clipped is None:
        raise ValidationError(
            f"bbox {bbox.to_dict()} lies outside the {height}x{width} image"
        )
    region = image[clipped.min_row : clipped.max_row, clipped.min_col : clipped.max_col]
    resized = Image.fromarray(np.ascontiguousarray(region)).resize(
        (target, target), Image.BILINEAR
    )
    pixels = np.asarray(resized, dtype=np.float32) / 255.0
    return CellCrop(pixels=pixels, source_image_id=image_id, source_bbox=clipped)


def check_feature_vector(values: np.ndarray) -> np.ndarray:
    """Boundary assertion: length exactly FEATURE_DIM, all entries finite."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (FEATURE_DIM,):
        raise ValidationError(f"feature vector must have shape ({FEATURE_DIM},), got {v.shape}")
    if not np.isfinite(v).all():
        raise ValidationError("feature vector contains non-finite values")
    return v


class PatchStatsFeatureBackend:
    """Reference embedding: per-patch mean/variance plus channel histograms.

    The crop is divided into a 4x4 patch grid; for each patch and channel the
    mean and variance are recorded (96 values), followed by a 16-bin
    normalized histogram per channel (48), then the global per-channel mean
    and variance (6). The remaining entries up to 2048 are zero. An all-zero
    crop maps to the constant vector whose only nonzero entries are the first
    histogram bin of each channel (indices 96, 112, 128), each 1.0.
    """

    id = "patch_stats"
    grid = 4
    bins = 16

    def __init__(self, expected_size: Optional[int] = None) -> None:
        self.expected_size = expected_size

    def extract(self, crop: CellCrop) -> np.ndarray:
        x = crop.pixels.astype(np.float64)
        rows = np.array_split(x, self.grid, axis=0)
        features: list[float] = []
        patches = [p for row in rows for p in np.array_split(row, self.grid, axis=1)]
        for patch in patches:
            features.extend(patch.reshape(-1, 3).mean(axis=0))
        for patch in patches:
            features.extend(patch.reshape(-1, 3).var(axis=0))
        n_pix = x.shape[0] * x.shape[1]
        for c in range(3):
            hist, _ = np.histogram(x[:, :, c], bins=self.bins, range=(0.0, 1.0))
            features.extend(hist / n_pix)
        flat = x.reshape(-1, 3)
        features.extend(flat.mean(axis=0))
        features.extend(flat.var(axis=0))
        out = np.zeros(FEATURE_DIM, dtype=np.float64)
        out[: len(features)] = features
        return out


class ResNet50FeatureBackend:
    """Production embedding: frozen pretrained 50-layer residual backbone,
    globally pooled final convolutional stage (2048 channels)."""

    id = "resnet50"
    expected_size = 224

    _IMAGENET_MEAN = (0.485, 0.456, 0.406)
    _IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self) -> None:
        self._module = None

    def _load(self):
        if self._module is not None:
            return self._module
        try:
            import torch
            from torchvision.models import ResNet50_Weights, resnet50
        except ImportError as exc:
            raise ConfigurationError(
                "the 'resnet50' backend needs torch and torchvision "
                "(pip install 'smeardx[torch]'); the 'patch_stats' reference "
                "backend runs without them"
            ) from exc
        try:
            net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V2)
        except Exception as exc:
            raise ConfigurationError(
                f"could not load pretrained backbone weights ({exc}); "
                "pre-populate the TORCH_HOME checkpoint cache or use the "
                "'patch_stats' reference backend"
            ) from exc
        net.fc = torch.nn.Identity()
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self._module = (torch, net)
        return self._module

    def extract(self, crop: CellCrop) -> np.ndarray:
        torch, net = self._load()
        x = crop.pixels.astype(np.float32)
        mean = np.asarray(self._IMAGENET_MEAN, dtype=np.float32)
        std = np.asarray(self._IMAGENET_STD, dtype=np.float32)
        tensor = torch.from_numpy((x - mean) / std).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            features = net(tensor)[0].numpy()
        return features.astype(np.float64)


_FEATURE_BACKENDS = {
    PatchStatsFeatureBackend.id: PatchStatsFeatureBackend,
    ResNet50FeatureBackend.id: ResNet50FeatureBackend,
}


def get_feature_backend(name: str, **options):
    if name not in _FEATURE_BACKENDS:
        raise ConfigurationError(
            f"unknown feature backend {name!r}; registered: {sorted(_FEATURE_BACKENDS)}"
        )
    return _FEATURE_BACKENDS[name](**options)


def extract_features(crop: CellCrop, backend) -> np.ndarray:
    """Embed a crop as a 2048-entry vector via the given backend."""
    if isinstance(backend, str):
        backend = get_feature_backend(backend)
    expected = getattr(backend, "expected_size", None)
    if expected is not None and crop.size != expected:
        raise ValidationError(
            f"backend '{backend.id}' expects {expected}x{expected} crops, "
            f"got {crop.size}x{crop.size}"
        )
    return check_feature_vector(backend.extract(crop))


# ---------------------------------------------------------------------------
# Four-layer classifier
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 8
    min_delta: float = 1e-4

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.patience < 1:
            raise ValidationError("patience must be at least 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "patience": self.patience,
            "min_delta": self.min_delta,
        }


def init_mlp_params(
    layer_sizes: Sequence[int], rng: np.random.Generator
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """He-scaled random weights and zero biases for a stack of dense layers."""
    weights = []
    biases = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((n_in, n_out)) * math.sqrt(2.0 / n_in))
        biases.append(np.zeros(n_out))
    return weights, biases


def mlp_forward(
    weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], x: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass: rectified hidden layers, softmax output.

    Returns (probabilities, layer inputs); the stored inputs feed backprop.
    """
    inputs = [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        inputs.append(a)
    logits = a @ weights[-1] + biases[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs, inputs


def loss_and_gradients(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean cross-entropy over the batch and its analytic parameter gradients."""
    probs, inputs = mlp_forward(weights, biases, x)
    n = x.shape[0]
    # log-softmax evaluated directly for numerical stability
    logits = inputs[-1] @ weights[-1] + biases[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), y].mean())

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grad_w: list[np.ndarray] = [np.empty(0)] * len(weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(weights)
    for k in range(len(weights) - 1, -1, -1):
        grad_w[k] = inputs[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ weights[k].T) * (inputs[k] > 0.0)
    return loss, grad_w, grad_b


@dataclass
class ClassifierModel:
    """Four dense weight layers plus the class order they predict."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    classes: tuple[str, ...]
    fingerprint: str
    config: dict
    history: dict

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    @classmethod
    def zeros(cls, classes: Sequence[str] = STAGE_CLASSES) -> "ClassifierModel":
        """All-zero-weight model; predicts the uniform distribution."""
        sizes = LAYER_SIZES
        weights = [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        biases = [np.zeros(b) for b in sizes[1:]]
        return cls(
            weights=weights,
            biases=biases,
            classes=tuple(classes),
            fingerprint=fingerprint({"zeros": list(sizes)}),
            config={},
            history={},
        )

    def save(self, path: Path | str) -> None:
        header = {
            "format_version": 1,
            "classes": list(self.classes),
            "layer_sizes": list(self.layer_sizes),
            "fingerprint": self.fingerprint,
            "config": self.config,
            "history": self.history,
        }
        arrays = {f"w{k}": w for k, w in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        np.savez_compressed(
            Path(path), header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays
        )

    @classmethod
    def load(cls, path: Path | str) -> "ClassifierModel":
        with np.load(Path(path)) as data:
            header = json.loads(bytes(data["header"]).decode())
            n_layers = len(header["layer_sizes"]) - 1
            weights = [data[f"w{k}"] for k in range(n_layers)]
            biases = [data[f"b{k}"] for k in range(n_layers)]
        return cls(
            weights=weights,
            biases=biases,
            classes=tuple(header["classes"]),
            fingerprint=header["fingerprint"],
            config=header["config"],
            history=header["history"],
        )


@dataclass(frozen=True)
class StagePrediction:
    probabilities: tuple[float, ...]
    predicted: str


def train_classifier(
    features: np.ndarray,
    labels: Sequence[str],
    config: ClassifierTrainConfig = ClassifierTrainConfig(),
) -> ClassifierModel:
    """Train the four-layer network with Adam on multiclass cross-entropy.

    Training is seeded and reproducible; per-epoch loss goes into the model
    history and training stops early once the loss plateaus.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise ValidationError(f"features must be (n, {FEATURE_DIM}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError("features contain non-finite values")
    if len(labels) != x.shape[0]:
        raise ValidationError(f"{x.shape[0]} feature rows vs {len(labels)} labels")
    for label in labels:
        if label not in STAGE_CLASSES:
            raise ValidationError(f"unknown stage label: {label!r}")
    if len(set(labels)) < 2:
        raise ValidationError("training needs at least two distinct classes")

    y = np.array([STAGE_CLASSES.index(label) for label in labels])
    rng = np.random.default_rng(config.seed)
    weights, biases = init_mlp_params(LAYER_SIZES, rng)

    # Adam state
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    t = 0

    n = x.shape[0]
    epoch_loss: list[float] = []
    best = math.inf
    plateau = 0
    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = perm[start : start + config.batch_size]
            loss, grad_w, grad_b = loss_and_gradients(weights, biases, x[batch], y[batch])
            total += loss * len(batch)
            t += 1
            scale = config.learning_rate * math.sqrt(1 - beta2**t) / (1 - beta1**t)
            for k in range(len(weights)):
                m_w[k] = beta1 * m_w[k] + (1 - beta1) * grad_w[k]
                v_w[k] = beta2 * v_w[k] + (1 - beta2) * grad_w[k] ** 2
                weights[k] -= scale * m_w[k] / (np.sqrt(v_w[k]) + eps)
                m_b[k] = beta1 * m_b[k] + (1 - beta1) * grad_b[k]
                v_b[k] = beta2 * v_b[k] + (1 - beta2) * grad_b[k] ** 2
                biases[k] -= scale * m_b[k] / (np.sqrt(v_b[k]) + eps)
        mean_loss = total / n
        epoch_loss.append(mean_loss)
        if best - mean_loss < config.min_delta:
            plateau += 1
            if plateau >= config.patience:
                break
        else:
            plateau = 0
        best = min(best, mean_loss)

    cfg = config.to_dict()
    return ClassifierModel(
        weights=weights,
        biases=biases,
        classes=STAGE_CLASSES,
        fingerprint=fingerprint(
            {
                "config": cfg,
                "classes": list(STAGE_CLASSES),
                "layer_sizes": list(LAYER_SIZES),
                "weights": array_digest(weights + biases),
            }
        ),
        config=cfg,
        history={"epoch_loss": epoch_loss, "epochs_run": len(epoch_loss)},
    )


def classify_crop(model: ClassifierModel, features: np.ndarray) -> StagePrediction:
    """Forward pass to stage probabilities; argmax ties go to the earliest class."""
    v = check_feature_vector(features)
    if model.weights[0].shape[0] != FEATURE_DIM:
        raise ValidationError(
            f"model expects {model.weights[0].shape[0]}-entry features"
        )
    probs, _ = mlp_forward(model.weights, model.biases, v[None, :])
    row = probs[0]
    idx = int(np.argmax(row))
    return StagePrediction(
        probabilities=tuple(float(p) for p in row),
        predicted=model.classes[idx],
    )
