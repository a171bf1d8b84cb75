"""Three-branch species distribution model and raster-backed predictor.

Each modality (Sentinel patch, climate cube, Landsat cube) is flattened and
passed through its own stack of affine + ReLU layers; the three embeddings
are concatenated and one affine layer + sigmoid gives per-species presence
probabilities. Training is plain mini-batch SGD on mean binary cross-entropy.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from biomap import kernels
from biomap.geogrid import GridSpec, TerrestrialMask
from biomap.raster import raster_read

log = logging.getLogger(__name__)

MODALITIES = ("sentinel", "climate", "landsat")
CHECKPOINT_MAGIC = b"ATLSDM1"
CHECKPOINT_VERSION = 1

# bce clamp; predict itself only clips to the open unit interval
P_CLAMP = 1e-7
_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


@dataclass
class ModalityTensor:
    modality: str
    values: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def shape(self):
        return self.values.shape


@dataclass(eq=False)
class SdmModel:
    shapes: dict  # modality -> tuple
    embedding_dim: int
    n_species: int
    encoders: dict  # modality -> list of (W, b)
    classifier: tuple  # (W (S, 3d), b (S,))
    active: tuple = MODALITIES
    history: list = field(default_factory=list)
    species_ids: list | None = None

    def parameters(self) -> list:
        """Parameter arrays in declaration order (branch by branch, then classifier)."""
        out = []
        for m in MODALITIES:
            for w, b in self.encoders[m]:
                out += [w, b]
        out += list(self.classifier)
        return out

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "SdmModel":
        return SdmModel(
            dict(self.shapes), self.embedding_dim, self.n_species,
            {m: [(w.copy(), b.copy()) for w, b in layers] for m, layers in self.encoders.items()},
            (self.classifier[0].copy(), self.classifier[1].copy()),
            tuple(self.active), list(self.history), self.species_ids,
        )

    def layer_widths(self) -> dict:
        return {m: [w.shape[0] for w, _ in self.encoders[m]] for m in MODALITIES}


def _flat_len(shape) -> int:
    return int(np.prod(shape)) if len(shape) else 1


def init_model(shapes: dict, n_species: int, embedding_dim: int = 16, n_layers: int = 2,
               seed: int = 0, active=MODALITIES) -> SdmModel:
    """He-initialized model; every encoder layer maps to ``embedding_dim`` units."""
    if set(shapes) != set(MODALITIES):
        raise ValueError(f"shapes must define exactly {MODALITIES}")
    if n_layers < 1 or embedding_dim < 1 or n_species < 1:
        raise ValueError("n_layers, embedding_dim and n_species must be >= 1")
    rng = np.random.default_rng(seed)
    encoders = {}
    for m in MODALITIES:
        layers, fan_in = [], _flat_len(shapes[m])
        for _ in range(n_layers):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(embedding_dim, fan_in))
            layers.append((w, np.zeros(embedding_dim)))
            fan_in = embedding_dim
        encoders[m] = layers
    fan_in = len(MODALITIES) * embedding_dim
    w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(n_species, fan_in))
    return SdmModel({m: tuple(shapes[m]) for m in MODALITIES}, embedding_dim, n_species, encoders,
                    (w, np.zeros(n_species)), _check_active(active))


def _check_active(active) -> tuple:
    active = tuple(active)
    if not active or any(m not in MODALITIES for m in active):
        raise ValueError(f"active branches must be a non-empty subset of {MODALITIES}")
    return tuple(m for m in MODALITIES if m in active)


def _affine(x, w, b, exact):
    # exact: per-row summation order independent of batch size (map products);
    # otherwise BLAS, for training throughput
    return kernels.affine(x, w, b) if exact else x @ w.T + b


def _encode_flat(x, layers, exact, pre_activation=False):
    a = x
    for i, (w, b) in enumerate(layers):
        z = _affine(a, w, b, exact)
        if pre_activation and i == len(layers) - 1:
            return z
        a = np.maximum(z, 0.0)
    return a


def encode_modality(tensor: ModalityTensor, model: SdmModel, pre_activation: bool = False):
    """Embedding of one modality tensor (or a batch with a leading axis).

    ``pre_activation=True`` returns the last layer's affine output before the
    rectifier, which is what an identity-weight check needs.
    """
    shape = model.shapes[tensor.modality]
    v = tensor.values
    if v.shape == shape:
        batch = v.reshape(1, -1)
        single = True
    elif v.shape[1:] == shape:
        batch = v.reshape(v.shape[0], -1)
        single = False
    else:
        raise ValueError(f"{tensor.modality} tensor shape {v.shape} does not match configured {shape}")
    if not np.all(np.isfinite(batch)):
        raise ValueError(f"{tensor.modality} tensor contains non-finite values")
    emb = _encode_flat(batch, model.encoders[tensor.modality], True, pre_activation)
    return emb[0] if single else emb


def _flatten_features(features: dict, model: SdmModel):
    """Validate a features mapping and return ({modality: (n, flat)}, single)."""
    missing = [m for m in MODALITIES if m not in features]
    if missing:
        raise ValueError(f"missing modality tensor(s): {missing}")
    out, n, single = {}, None, None
    for m in MODALITIES:
        v = features[m]
        v = v.values if isinstance(v, ModalityTensor) else np.asarray(v, dtype=np.float64)
        shape = model.shapes[m]
        if v.shape == shape and single is not False:
            single = True
            v = v.reshape(1, -1)
        elif v.ndim == 2 and v.shape[1] == _flat_len(shape) and single is not True:
            single = False
        elif v.shape[1:] == shape and single is not True:
            single = False
            v = v.reshape(v.shape[0], -1)
        else:
            raise ValueError(f"{m} tensor shape {v.shape} does not match configured {shape}")
        if n is not None and v.shape[0] != n:
            raise ValueError("modality batches have different lengths")
        n = v.shape[0]
        out[m] = np.ascontiguousarray(v, dtype=np.float64)
    return out, single


def _forward(model: SdmModel, x: dict, exact: bool):
    """Return logits plus the cache needed for backprop."""
    acts, embs = {}, []
    for m in MODALITIES:
        a = x[m]
        layer_acts = [a]
        for w, b in model.encoders[m]:
            a = np.maximum(_affine(a, w, b, exact), 0.0)
            layer_acts.append(a)
        acts[m] = layer_acts
        embs.append(a if m in model.active else np.zeros_like(a))
    h = np.concatenate(embs, axis=1)
    logits = _affine(h, model.classifier[0], model.classifier[1], exact)
    return logits, (acts, h)


def _sigmoid(logits):
    return np.clip(expit(logits), _P_LO, _P_HI)


def predict(features: dict, model: SdmModel) -> np.ndarray:
    """Presence probabilities, strictly inside (0, 1).

    ``features`` maps each modality to one tensor of its configured shape, or
    to a batch (leading axis); the result is ``(S,)`` or ``(n, S)``.
    """
    x, single = _flatten_features(features, model)
    logits, _ = _forward(model, x, exact=True)
    p = _sigmoid(logits)
    return p[0] if single else p


def bce_loss(pred, truth) -> float:
    """Mean binary cross-entropy over species (and rows), probabilities clamped."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth entries must be 0 or 1")
    p = np.clip(pred, P_CLAMP, 1.0 - P_CLAMP)
    return float(np.mean(-(truth * np.log(p) + (1.0 - truth) * np.log1p(-p))))


def loss_and_grad(model: SdmModel, x: dict, y: np.ndarray, exact: bool = False):
    """Mean BCE of ``predict`` on a batch and its gradient per parameter array.

    Gradients are returned in :meth:`SdmModel.parameters` order.
    """
    logits, (acts, h) = _forward(model, x, exact)
    p = expit(logits)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    inside = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    dz = np.where(inside, p - y, 0.0) / y.size

    wc, _ = model.classifier
    g_wc = dz.T @ h
    g_bc = dz.sum(axis=0)
    dh = dz @ wc
    d = model.embedding_dim
    grads = {}
    for k, m in enumerate(MODALITIES):
        layers = model.encoders[m]
        if m not in model.active:
            grads[m] = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
            continue
        da = dh[:, k * d:(k + 1) * d]
        layer_grads = []
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            dzl = da * (acts[m][li + 1] > 0)
            layer_grads.append((dzl.T @ acts[m][li], dzl.sum(axis=0)))
            da = dzl @ w
        grads[m] = layer_grads[::-1]
    flat = []
    for m in MODALITIES:
        for gw, gb in grads[m]:
            flat += [gw, gb]
    return loss, flat + [g_wc, g_bc]


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    embedding_dim: int = 16
    n_layers: int = 2
    active: tuple = MODALITIES

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be a finite value >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.active = _check_active(self.active)


def stack_features(samples) -> dict:
    """Stack a sequence of per-sample feature mappings into flat batches."""
    return {m: np.stack([np.asarray(getattr(s[m], "values", s[m]), dtype=np.float64).ravel()
                         for s in samples]) for m in MODALITIES}


def train(data, config: TrainConfig, shapes: dict | None = None) -> SdmModel:
    """Fit a model on ``(features, labels)`` pairs with mini-batch SGD.

    ``shapes`` defaults to the shapes of the first sample's tensors.
    """
    data = list(data)
    if not data:
        raise ValueError("training data is empty")
    first = data[0][0]
    if shapes is None:
        shapes = {m: tuple(np.shape(getattr(first[m], "values", first[m]))) for m in MODALITIES}
    y = np.asarray([np.asarray(lab, dtype=np.float64) for _, lab in data])
    x = stack_features([f for f, _ in data])
    return fit(x, y, config, shapes)


def fit(x: dict, y: np.ndarray, config: TrainConfig, shapes: dict, init: SdmModel | None = None):
    """Array-level training: ``x[m]`` is ``(n, flat_len)``, ``y`` is ``(n, S)``."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if n == 0:
        raise ValueError("training data is empty")
    for m in MODALITIES:
        if x[m].shape != (n, _flat_len(shapes[m])):
            raise ValueError(f"{m} features have shape {x[m].shape}, expected {(n, _flat_len(shapes[m]))}")
    model = init.copy() if init is not None else init_model(
        shapes, y.shape[1], config.embedding_dim, config.n_layers, config.seed, config.active)
    model.active = config.active
    rng = np.random.default_rng(config.seed + 1)
    initial, _ = loss_and_grad(model, x, y)
    model.history = [initial]
    params = model.parameters()
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, grads = loss_and_grad(model, {m: x[m][idx] for m in MODALITIES}, y[idx])
                if not np.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                        f"learning rate {config.learning_rate} may be too high")
                for p, g in zip(params, grads):
                    p -= config.learning_rate * g
            epoch_loss, _ = loss_and_grad(model, x, y)
            if not np.isfinite(epoch_loss):
                raise FloatingPointError(
                    f"non-finite training loss after epoch {epoch}; "
                    f"learning rate {config.learning_rate} may be too high")
            model.history.append(epoch_loss)
            log.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return model


# -- checkpoint --------------------------------------------------------------

def save_model(path, model: SdmModel, species_ids=None) -> None:
    """Write ``ATLSDM1`` + u32 metadata length + JSON metadata + f32 LE parameters."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "modalities": list(MODALITIES),
        "shapes": {m: list(model.shapes[m]) for m in MODALITIES},
        "embedding_dim": model.embedding_dim,
        "n_species": model.n_species,
        "layer_widths": model.layer_widths(),
        "active": list(model.active),
        "param_shapes": [list(p.shape) for p in model.parameters()],
    }
    if species_ids is not None:
        meta["species_ids"] = list(species_ids)
    blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> SdmModel:
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an SDM checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    if len(raw) < off + 4:
        raise ValueError(f"{path}: truncated before metadata length")
    (n_meta,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        meta = json.loads(raw[off:off + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt metadata block: {exc}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    off += n_meta
    shapes = [tuple(s) for s in meta["param_shapes"]]
    expected = off + 4 * sum(_flat_len(s) for s in shapes)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arrays = []
    for s in shapes:
        k = _flat_len(s)
        arrays.append(np.frombuffer(raw, "<f4", k, off).astype(np.float64).reshape(s))
        off += 4 * k
    it = iter(arrays)
    encoders = {m: [(next(it), next(it)) for _ in meta["layer_widths"][m]] for m in MODALITIES}
    classifier = (next(it), next(it))
    return SdmModel({m: tuple(meta["shapes"][m]) for m in MODALITIES}, meta["embedding_dim"],
                    meta["n_species"], encoders, classifier, tuple(meta["active"]),
                    species_ids=meta.get("species_ids"))


# -- predictors --------------------------------------------------------------

class ModelPredictor:
    """Serves model probabilities for grid cells from per-cell feature stacks.

    ``features[m]`` is ``(n_cells, flat_len)`` in flat cell order. Water cells
    take the features of their nearest land cell when a mask is given.
    """

    def __init__(self, model: SdmModel, grid: GridSpec, features: dict,
                 mask: TerrestrialMask | None = None):
        self.model = model
        self.grid = grid
        self.n_species = model.n_species
        for m in MODALITIES:
            if features[m].shape != (grid.n_cells, _flat_len(model.shapes[m])):
                raise ValueError(f"{m} feature stack has shape {features[m].shape}")
        self.features = features
        self.source = mask.relocation_table() if mask is not None else None

    def predict_cells(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        src = self.source[flat] if self.source is not None else flat
        return predict({m: self.features[m][src] for m in MODALITIES}, self.model)


def load_feature_stacks(paths: dict, grid: GridSpec | None = None):
    """Read one multi-band raster per modality into ``(n_cells, bands)`` arrays."""
    out, ref = {}, grid
    for m in MODALITIES:
        r = raster_read(paths[m])
        if ref is None:
            ref = r.grid
        elif r.grid != ref:
            raise ValueError(f"{m} feature raster grid {r.grid} differs from {ref}")
        out[m] = np.ascontiguousarray(
            r.data.reshape(r.n_bands, -1).T.astype(np.float64))
    return out, ref


class RasterPredictor:
    """Precomputed per-species probability rasters; missing species and nodata read 0."""

    def __init__(self, grid: GridSpec, n_species: int, layers: dict):
        self.grid = grid
        self.n_species = n_species
        self.layers = layers  # species index -> (n_cells,) float64

    def predict_cells(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        out = np.zeros((flat.size, self.n_species), dtype=np.float64)
        for s, layer in self.layers.items():
            out[:, s] = layer[flat]
        return out


def load_raster_predictor(paths, catalog) -> RasterPredictor:
    """Build a predictor from per-species rasters.

    ``paths`` maps species id to raster path, or is a list of paths whose file
    stem is the species id. Files must all share one grid.
    """
    if not isinstance(paths, dict):
        paths = {Path(p).stem: p for p in paths}
    grid, layers = None, {}
    for sid, p in sorted(paths.items()):
        if sid not in catalog:
            raise ValueError(f"raster {p} names species {sid!r} absent from the catalog")
        r = raster_read(p)
        if grid is None:
            grid = r.grid
        elif r.grid != grid:
            raise ValueError(f"raster {p} grid {r.grid} is inconsistent with {grid}")
        v = r.data[0].ravel().astype(np.float64)
        v[~np.isfinite(v)] = 0.0
        if r.nodata is not None and np.isfinite(r.nodata):
            v[r.data[0].ravel() == r.nodata] = 0.0
        layers[catalog.index[sid]] = v
    if grid is None:
        raise ValueError("no rasters given")
    return RasterPredictor(grid, len(catalog), layers)
