"""Generated test world: smooth environmental fields, three habitats, eight species.

Two latent fields ``u`` and ``v`` drive everything. Habitats are bands of
``u``; each species belongs to one habitat's signature, some only on one side
of ``v = 0``. The three modalities observe noisy random mixtures of
``(u, v, u*v, u^2)``, so every branch carries the signal.
"""

from dataclasses import dataclass

import numpy as np

from biomap.geogrid import GridSpec, TerrestrialMask, cell_center
from biomap.occurrence import OccurrenceRecord, SpeciesCatalog

SHAPES = {"sentinel": (4, 2, 2), "climate": (3, 4), "landsat": (6, 2)}
HABITATS = ("S42", "R22", "R21")  # low, mid, high u
SPECIES_IDS = [f"sp{i}" for i in range(8)]


@dataclass
class SyntheticWorld:
    grid: GridSpec
    catalog: SpeciesCatalog
    mask: TerrestrialMask
    features: dict  # modality -> (n_cells, flat)
    shapes: dict
    truth: np.ndarray  # (n_cells, 8) uint8
    habitat: np.ndarray  # (n_cells,) level-3 codes
    u: np.ndarray
    v: np.ndarray


def _field(rng, h, w, n_waves=4):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    f = np.zeros((h, w))
    for _ in range(n_waves):
        kx, ky = rng.uniform(0.5, 3.0, size=2)
        f += np.sin(2 * np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
    return (f - f.mean()) / f.std()


def _catalog():
    return SpeciesCatalog(
        SPECIES_IDS,
        is_tree=[1, 0, 0, 1, 0, 0, 0, 0],
        is_invasive=[0, 0, 0, 0, 0, 0, 0, 1],
        eu_directive=[0, 1, 0, 0, 1, 0, 0, 0],
        iucn_status=["LC", "EN", "VU", "NT", "CR", "LC", "NA", "EN"],
    )


def truth_from_latents(u, v):
    """Species presence and habitat per cell from the latent fields."""
    lo, hi = np.quantile(u, [1 / 3, 2 / 3])
    hab = np.where(u < lo, 0, np.where(u < hi, 1, 2))
    y = np.zeros(u.shape + (8,), dtype=np.uint8)
    y[..., 6] = hab == 0
    y[..., 7] = hab == 0
    y[..., 0] = hab == 1
    y[..., 1] = hab == 1
    y[..., 2] = (hab == 1) & (v > 0)
    y[..., 3] = hab == 2
    y[..., 4] = hab == 2
    y[..., 5] = (hab == 2) & (v < 0)
    return y, np.asarray(HABITATS)[hab]


def make_world(size: int = 200, cell_size: float = 250.0, seed: int = 0,
               noise: float = 0.05, water_fraction: float = 0.04) -> SyntheticWorld:
    rng = np.random.default_rng(seed)
    grid = GridSpec(0.0, 0.0, size, size, cell_size)
    u = _field(rng, size, size)
    v = _field(rng, size, size)
    truth, hab = truth_from_latents(u, v)

    # a round lake
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    radius = np.sqrt(water_fraction * size * size / np.pi)
    land = (yy - cy) ** 2 + (xx - cx) ** 2 > radius ** 2
    mask = TerrestrialMask(land, grid)

    basis = np.stack([u, v, u * v, u ** 2 - 1.0], axis=-1).reshape(-1, 4)
    features = {}
    for m, shape in SHAPES.items():
        k = int(np.prod(shape))
        mix = rng.normal(size=(4, k))
        features[m] = basis @ mix + rng.normal(0.0, noise, size=(basis.shape[0], k))
    return SyntheticWorld(grid, _catalog(), mask, features, dict(SHAPES),
                          truth.reshape(-1, 8), hab.ravel(), u.ravel(), v.ravel())


def sample_records(world: SyntheticWorld, survey_fraction: float = 0.15,
                   po_fraction: float = 0.02, seed: int = 1) -> list:
    """PA plots listing each surveyed land cell's true species, plus sparse PO sightings."""
    rng = np.random.default_rng(seed)
    grid = world.grid
    land = np.flatnonzero(world.mask.bitmask.ravel())
    out = []
    surveyed = rng.choice(land, size=int(survey_fraction * land.size), replace=False)
    for k, flat in enumerate(np.sort(surveyed)):
        x, y = cell_center(grid, grid.cell_at(flat))
        present = np.flatnonzero(world.truth[flat])
        pid = f"pa{k:06d}"
        if present.size == 0:
            out.append(OccurrenceRecord("", x, y, "2021-06-01", "PA", pid))
        for s in present:
            out.append(OccurrenceRecord(world.catalog.species_ids[s], x, y, "2021-06-01", "PA", pid))
    sighted = rng.choice(land, size=int(po_fraction * land.size), replace=False)
    for flat in np.sort(sighted):
        present = np.flatnonzero(world.truth[flat])
        if present.size == 0:
            continue
        s = rng.choice(present)
        x, y = cell_center(grid, grid.cell_at(flat))
        jitter = rng.uniform(-0.4, 0.4, size=2) * grid.cell_size
        out.append(OccurrenceRecord(world.catalog.species_ids[s], x + jitter[0], y + jitter[1],
                                    "2021-07-15", "PO"))
    return out


def habitat_plots(world: SyntheticWorld, cells) -> list:
    """Labeled ``(species indices, level-3 code)`` plots at the given cells."""
    return [(np.flatnonzero(world.truth[c]).tolist(), str(world.habitat[c]))
            for c in cells if world.truth[c].any()]


