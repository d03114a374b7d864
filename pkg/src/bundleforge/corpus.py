"""Items, bundles, interactions and the cases built from them."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import SplitMix64, derive_seed


class DataFormatError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ConfigError(ValueError):
    pass


class PopClass(enum.IntEnum):
    HEAD = 0
    MID = 1
    TAIL = 2


class Scenario(str, enum.Enum):
    OVERALL = "overall"
    POP_TO_LT = "pop2lt"
    LT_TO_POP = "lt2pop"
    POP_TO_POP = "pop2pop"
    LT_TO_LT = "lt2lt"
    MIXED = "mixed"


POPULARITY_SCENARIOS = (Scenario.POP_TO_LT, Scenario.LT_TO_POP, Scenario.POP_TO_POP, Scenario.LT_TO_LT)
EVAL_SCENARIOS = (Scenario.OVERALL,) + POPULARITY_SCENARIOS


class Split(enum.IntEnum):
    TRAIN = 0
    TEST = 1
    VAL = 2


# -- data model ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ItemCorpus:
    text: np.ndarray
    media: np.ndarray
    item_ids: tuple

    def __post_init__(self):
        n = len(self.item_ids)
        if self.text.shape[0] != n or self.media.shape[0] != n:
            raise DataFormatError(
                f"feature rows ({self.text.shape[0]}, {self.media.shape[0]}) != item count {n}"
            )
        if self.text.ndim != 2 or self.media.ndim != 2 or min(self.text.shape[1], self.media.shape[1]) < 1:
            raise DataFormatError("feature matrices must be 2-D with width >= 1")
        if len(set(self.item_ids)) != n:
            raise DataFormatError("external item ids are not unique")

    @property
    def n(self) -> int:
        return len(self.item_ids)

    @property
    def d_t(self) -> int:
        return self.text.shape[1]

    @property
    def d_m(self) -> int:
        return self.media.shape[1]


@dataclass(frozen=True, eq=False)
class BundleTable:
    items: tuple  # tuple of int64 arrays, one per bundle
    ids: tuple
    item_ids: tuple = ()

    def __post_init__(self):
        for b, members in zip(self.ids, self.items):
            if len(members) < 2 or len(set(members.tolist())) != len(members):
                raise DataFormatError(f"bundle {b!r} needs >= 2 distinct items")
            if self.item_ids and int(members.max()) >= len(self.item_ids):
                raise DataFormatError(f"bundle {b!r} references unknown item")

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, k: int) -> np.ndarray:
        return self.items[k]


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    user_ids: tuple = ()
    item_ids: tuple = ()

    @property
    def nnz(self) -> int:
        return len(self.users)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items).astype(np.int64)

    def to_csr(self):
        import scipy.sparse as sp

        data = np.ones(self.nnz, dtype=np.float64)
        return sp.csr_matrix((data, (self.users, self.items)), shape=(self.n_users, self.n_items))


@dataclass(frozen=True, eq=False)
class PopularityProfile:
    counts: np.ndarray
    rank: np.ndarray
    classes: np.ndarray
    head_ratio: float
    tail_ratio: float

    @property
    def n(self) -> int:
        return len(self.counts)

    def members(self, cls: PopClass) -> np.ndarray:
        return np.flatnonzero(self.classes == cls)


@dataclass(frozen=True)
class BundlingCase:
    bundle: int
    query: tuple
    target: tuple
    scenario: Scenario = Scenario.MIXED

    def __post_init__(self):
        if not self.query or not self.target:
            raise ValueError("a case needs non-empty query and target sets")
        if set(self.query) & set(self.target):
            raise ValueError("query and target overlap")


@dataclass(frozen=True, eq=False)
class Dataset:
    corpus: ItemCorpus
    bundles: BundleTable
    interactions: InteractionMatrix
    meta: dict = field(default_factory=dict)


# -- text formats ----------------------------------------------------------

def _read_pairs(path):
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if "\t" not in line:
                if any(sep in line for sep in (",", ";", " ", "|")):
                    raise DataFormatError("unknown separator, expected <TAB>", path, lineno)
                raise DataFormatError("malformed line, expected two tab-separated fields", path, lineno)
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError("malformed line, expected two tab-separated fields", path, lineno)
            pairs.append((parts[0], parts[1], lineno))
    return pairs


def _resolve(ext: str, index: dict, frozen: bool, path, lineno: int) -> int:
    k = index.get(ext)
    if k is None:
        if frozen:
            raise DataFormatError(f"unknown item id {ext!r}", path, lineno)
        k = index[ext] = len(index)
    return k


def load_interactions(path, item_index: dict | None = None) -> InteractionMatrix:
    """Read ``user<TAB>item`` lines into a deduplicated binary matrix.

    Users are numbered by first appearance.  Items use ``item_index`` when
    given (unknown ids are an error), otherwise first appearance as well.
    """
    pairs = _read_pairs(path)
    frozen = item_index is not None
    items_ix = dict(item_index) if frozen else {}
    users_ix: dict = {}
    seen = set()
    us, its = [], []
    for u, i, lineno in pairs:
        ui = _resolve(u, users_ix, False, path, lineno)
        ii = _resolve(i, items_ix, frozen, path, lineno)
        if (ui, ii) in seen:
            continue
        seen.add((ui, ii))
        us.append(ui)
        its.append(ii)
    if not pairs:
        warnings.warn(f"{path}: no interactions", stacklevel=2)
    n_items = len(items_ix)
    return InteractionMatrix(
        n_users=len(users_ix),
        n_items=n_items,
        users=np.asarray(us, dtype=np.int64),
        items=np.asarray(its, dtype=np.int64),
        user_ids=tuple(users_ix),
        item_ids=tuple(sorted(items_ix, key=items_ix.get)),
    )


def load_bundles(path, item_index: dict | None = None) -> BundleTable:
    """Read ``bundle<TAB>item`` lines; item order inside a bundle follows the file."""
    pairs = _read_pairs(path)
    frozen = item_index is not None
    items_ix = dict(item_index) if frozen else {}
    members: dict = {}
    for b, i, lineno in pairs:
        ii = _resolve(i, items_ix, frozen, path, lineno)
        lst = members.setdefault(b, [])
        if ii not in lst:
            lst.append(ii)
    ids, items = [], []
    for b, lst in members.items():
        if len(lst) < 2:
            warnings.warn(f"{path}: bundle {b!r} has fewer than 2 items, dropped", stacklevel=2)
            continue
        ids.append(b)
        items.append(np.asarray(lst, dtype=np.int64))
    return BundleTable(
        items=tuple(items), ids=tuple(ids), item_ids=tuple(sorted(items_ix, key=items_ix.get))
    )


def save_interactions(path, D: InteractionMatrix) -> None:
    user_ids = D.user_ids or tuple(str(u) for u in range(D.n_users))
    item_ids = D.item_ids or tuple(str(i) for i in range(D.n_items))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in zip(D.users.tolist(), D.items.tolist()):
            fh.write(f"{user_ids[u]}\t{item_ids[i]}\n")


def save_bundles(path, table: BundleTable, item_ids=None) -> None:
    item_ids = item_ids or table.item_ids
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b, members in zip(table.ids, table.items):
            for i in members.tolist():
                fh.write(f"{b}\t{item_ids[i] if item_ids else i}\n")


def load_idmap(path) -> dict:
    index = {}
    for ext, dense, lineno in _read_pairs(path):
        try:
            index[ext] = int(dense)
        except ValueError:
            raise DataFormatError(f"dense id {dense!r} is not an integer", path, lineno) from None
    if sorted(index.values()) != list(range(len(index))):
        raise DataFormatError("dense ids must be a permutation of 0..n-1", path)
    return index


def save_idmap(path, item_ids) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, ext in enumerate(item_ids):
            fh.write(f"{ext}\t{k}\n")


# -- feature files ---------------------------------------------------------

FEATURE_MAGIC = b"BNDF"


def save_features(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise DataFormatError("feature matrix must be 2-D", path)
    n, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, dim))
        fh.write(matrix.tobytes())


def load_features(path) -> np.ndarray:
    """Load a ``BNDF`` binary feature table, or the CSV fallback."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FEATURE_MAGIC:
        if len(raw) < 12:
            raise DataFormatError("truncated header", path)
        n, dim = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 4 * n * dim:
            raise DataFormatError(f"expected {n}x{dim} floats, file size {len(raw)}", path)
        return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, dim).astype(np.float32)
    return _load_feature_csv(path)


def _load_feature_csv(path) -> np.ndarray:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "item_id":
            raise DataFormatError("neither BNDF magic nor a CSV header 'item_id,...'", path)
        dim = len(header) - 1
        rows = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != dim + 1:
                raise DataFormatError(f"expected {dim + 1} columns", path, lineno)
            try:
                rows[int(rec[0])] = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise DataFormatError(str(exc), path, lineno) from None
    if sorted(rows) != list(range(len(rows))):
        raise DataFormatError("item ids must cover 0..n-1", path)
    return np.asarray([rows[k] for k in range(len(rows))], dtype=np.float32).reshape(len(rows), dim)


# -- dataset directories ---------------------------------------------------

DATASET_FILES = ("idmap.tsv", "interactions.tsv", "bundles.tsv", "text.bndf", "media.bndf")


def save_dataset(directory, data: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    item_ids = data.corpus.item_ids
    save_idmap(d / "idmap.tsv", item_ids)
    save_interactions(d / "interactions.tsv", data.interactions)
    save_bundles(d / "bundles.tsv", data.bundles, item_ids)
    save_features(d / "text.bndf", data.corpus.text)
    save_features(d / "media.bndf", data.corpus.media)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in DATASET_FILES:
        if not (d / name).exists():
            raise DataFormatError(f"dataset file {name} is missing", d / name)
    index = load_idmap(d / "idmap.tsv")
    item_ids = tuple(sorted(index, key=index.get))
    corpus = ItemCorpus(load_features(d / "text.bndf"), load_features(d / "media.bndf"), item_ids)
    bundles = load_bundles(d / "bundles.tsv", index)
    D = load_interactions(d / "interactions.tsv", index)
    return Dataset(corpus, bundles, D)


def dataset_checksum(directory) -> str:
    h = hashlib.sha256()
    for name in DATASET_FILES:
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


# -- popularity ------------------------------------------------------------

def _ratio_count(ratio: float, n: int) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return min(n, math.ceil(ratio * n - 1e-9))


def compute_popularity(D, head_ratio: float = 0.3, tail_ratio: float = 0.3) -> PopularityProfile:
    """Rank items by interaction count (desc, ties by ascending id) and classify.

    ``D`` may be an :class:`InteractionMatrix` or a raw count vector.
    """
    if not (0.0 <= head_ratio <= 1.0 and 0.0 <= tail_ratio <= 1.0):
        raise ConfigError(f"popularity ratios must lie in [0, 1], got {head_ratio}, {tail_ratio}")
    if head_ratio + tail_ratio > 1.0 + 1e-12:
        raise ConfigError(f"head_ratio + tail_ratio must be <= 1, got {head_ratio + tail_ratio}")
    counts = D.counts if isinstance(D, InteractionMatrix) else np.asarray(D, dtype=np.int64)
    n = len(counts)
    order = np.lexsort((np.arange(n), -counts))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    classes = np.full(n, PopClass.MID, dtype=np.int8)
    n_head = _ratio_count(head_ratio, n)
    # ceil on both sides can overlap on tiny corpora; HEAD wins
    n_tail = min(_ratio_count(tail_ratio, n), n - n_head)
    classes[order[:n_head]] = PopClass.HEAD
    if n_tail:
        classes[order[n - n_tail:]] = PopClass.TAIL
    return PopularityProfile(counts, rank, classes, head_ratio, tail_ratio)


# -- splits and cases ------------------------------------------------------

def split_bundles(table: BundleTable | int, seed: int) -> np.ndarray:
    """Seeded 7:2:1 train/test/val assignment (floor on train and test)."""
    n = table if isinstance(table, int) else len(table)
    if n == 0:
        raise ValueError("cannot split an empty bundle table")
    perm = SplitMix64(seed).permutation(n)
    n_train = 7 * n // 10
    n_test = 2 * n // 10
    out = np.empty(n, dtype=np.int8)
    out[perm[:n_train]] = Split.TRAIN
    out[perm[n_train:n_train + n_test]] = Split.TEST
    out[perm[n_train + n_test:]] = Split.VAL
    return out


def label_case(query, target, profile: PopularityProfile) -> Scenario:
    q = {int(c) for c in profile.classes[list(query)]}
    t = {int(c) for c in profile.classes[list(target)]}
    head, tail = {PopClass.HEAD}, {PopClass.TAIL}
    if q == head and t == tail:
        return Scenario.POP_TO_LT
    if q == tail and t == head:
        return Scenario.LT_TO_POP
    if q == head and t == head:
        return Scenario.POP_TO_POP
    if q == tail and t == tail:
        return Scenario.LT_TO_LT
    return Scenario.MIXED


def _subset_split(items: np.ndarray, hide: np.ndarray) -> tuple:
    mask = np.zeros(len(items), dtype=bool)
    mask[hide] = True
    return tuple(items[~mask].tolist()), tuple(items[mask].tolist())


def make_training_case(items, rng: SplitMix64, bundle: int = -1, profile=None) -> BundlingCase:
    """Random partial bundle: the query keeps a U[0.3, 0.8] fraction of the items."""
    items = np.asarray(items, dtype=np.int64)
    size = len(items)
    if size < 2:
        raise ValueError(f"bundle of size {size} cannot be split")
    frac = rng.uniform(0.3, 0.8, 1)[0]
    n_query = min(max(int(math.floor(frac * size + 0.5)), 1), size - 1)
    perm = rng.permutation(size)
    query, target = _subset_split(items, perm[n_query:])
    label = label_case(query, target, profile) if profile is not None else Scenario.MIXED
    return BundlingCase(bundle, query, target, label)


def random_holdout(items, seed: int, bundle: int) -> tuple:
    """Hide a seeded random non-empty proper subset; returns (query, target)."""
    items = np.asarray(items, dtype=np.int64)
    rng = SplitMix64(derive_seed(seed, bundle))
    n_hidden = 1 + rng.integers(len(items) - 1)
    perm = rng.permutation(len(items))
    return _subset_split(items, perm[:n_hidden])


def make_scenario_cases(
    items, profile: PopularityProfile, scenario: Scenario, bundle: int = 0, seed: int = 0
) -> list:
    """Evaluation cases of one scenario for one bundle (empty when ineligible).

    Bundles containing any MID item never qualify for the popularity scenarios.
    """
    items = np.asarray(items, dtype=np.int64)
    scenario = Scenario(scenario)
    if scenario is Scenario.OVERALL:
        query, target = random_holdout(items, seed, bundle)
        return [BundlingCase(bundle, query, target, Scenario.OVERALL)]
    classes = profile.classes[items]
    if np.any(classes == PopClass.MID):
        return []
    heads = tuple(items[classes == PopClass.HEAD].tolist())
    tails = tuple(items[classes == PopClass.TAIL].tolist())
    if scenario is Scenario.POP_TO_LT and heads and tails:
        return [BundlingCase(bundle, heads, tails, scenario)]
    if scenario is Scenario.LT_TO_POP and heads and tails:
        return [BundlingCase(bundle, tails, heads, scenario)]
    if scenario is Scenario.POP_TO_POP and not tails:
        query, target = random_holdout(items, seed, bundle)
        return [BundlingCase(bundle, query, target, scenario)]
    if scenario is Scenario.LT_TO_LT and not heads:
        query, target = random_holdout(items, seed, bundle)
        return [BundlingCase(bundle, query, target, scenario)]
    return []


def build_eval_cases(
    table: BundleTable, bundle_ids, profile: PopularityProfile, scenarios=EVAL_SCENARIOS, seed: int = 0
) -> dict:
    """``{scenario: [cases]}`` over the given bundles, ordered by bundle id."""
    out = {}
    for sc in scenarios:
        sc = Scenario(sc)
        cases = []
        for b in sorted(int(x) for x in bundle_ids):
            cases.extend(make_scenario_cases(table[b], profile, sc, bundle=b, seed=seed))
        out[sc] = cases
    return out


# -- synthetic data --------------------------------------------------------

@dataclass
class SynthConfig:
    n_items: int = 500
    n_users: int = 2000
    n_bundles: int = 1500
    bundle_size_range: tuple = (2, 5)
    zipf_exponent: float = 1.2
    d_t: int = 32
    d_m: int = 24
    seed: int = 0
    n_themes: int = 10
    styles_per_theme: int = 5
    latent_dim: int = 16
    interactions_per_user: int = 15
    theme_affinity: float = 4.0
    style_bundle_prob: float = 0.5
    style_strength: float = 0.6
    feature_noise: float = 1.5
    bundle_pop_exponent: float = 0.0


def _zipf_weights(n: int, exponent: float, rng: SplitMix64) -> np.ndarray:
    ranks = rng.permutation(n)
    return (ranks + 1.0) ** (-exponent)


def synth_generate(config: SynthConfig) -> Dataset:
    """Themed synthetic corpus with Zipf-skewed user interactions.

    Items belong to a theme and a style inside it.  Text and media features are
    noisy projections of ``theme + style_strength * style`` vectors, so content
    carries bundling signal.  Bundles draw items uniformly from one style (or,
    with probability ``1 - style_bundle_prob``, from the whole theme), so bundle
    membership does not depend on popularity.  Users prefer one or two themes
    and draw items with weight ``zipf * (1 + affinity * preferred)``.
    """
    c = config
    lo, hi = c.bundle_size_range
    per_theme = c.n_items // max(c.n_themes, 1)
    if c.n_items < 4 or c.n_users < 1 or c.n_bundles < 1 or c.n_themes < 1:
        raise ConfigError("synthetic config needs n_items >= 4 and positive users, bundles, themes")
    if not 2 <= lo <= hi or per_theme < hi or per_theme < c.styles_per_theme:
        raise ConfigError(
            f"infeasible bundle sizes {c.bundle_size_range} for {per_theme} items per theme"
        )
    if c.d_t < 1 or c.d_m < 1:
        raise ConfigError("feature widths must be >= 1")

    rng = lambda key: SplitMix64(derive_seed(c.seed, key))  # noqa: E731
    n = c.n_items

    theme = np.empty(n, dtype=np.int64)
    theme[rng("theme").permutation(n)] = np.arange(n) % c.n_themes
    style = np.empty(n, dtype=np.int64)
    for t in range(c.n_themes):
        members = np.flatnonzero(theme == t)
        style[members] = np.arange(len(members)) % c.styles_per_theme

    theme_vec = rng("theme_vec").normal((c.n_themes, c.latent_dim))
    style_vec = rng("style_vec").normal((c.n_themes, c.styles_per_theme, c.latent_dim))
    latent = theme_vec[theme] + c.style_strength * style_vec[theme, style]
    proj_t = rng("proj_t").normal((c.latent_dim, c.d_t)) / math.sqrt(c.latent_dim)
    proj_m = rng("proj_m").normal((c.latent_dim, c.d_m)) / math.sqrt(c.latent_dim)
    text = latent @ proj_t + c.feature_noise * rng("noise_t").normal((n, c.d_t))
    media = latent @ proj_m + c.feature_noise * rng("noise_m").normal((n, c.d_m))

    pop = _zipf_weights(n, c.zipf_exponent, rng("zipf"))

    brng = rng("bundles")
    bundles = []
    for _ in range(c.n_bundles):
        t = brng.integers(c.n_themes)
        size = lo + brng.integers(hi - lo + 1)
        pool = np.flatnonzero(theme == t)
        if brng.random() < c.style_bundle_prob:
            s = brng.integers(c.styles_per_theme)
            narrow = pool[style[pool] == s]
            if len(narrow) >= size:
                pool = narrow
        weights = pop[pool] ** c.bundle_pop_exponent
        pick = []
        for _ in range(size):
            k = int(brng.choice(weights, 1)[0])
            pick.append(pool[k])
            weights = weights.copy()
            weights[k] = 0.0
        bundles.append(np.sort(np.asarray(pick, dtype=np.int64)))

    urng = rng("users")
    users, items = [], []
    for u in range(c.n_users):
        prefs = {urng.integers(c.n_themes)}
        if urng.random() < 0.5:
            prefs.add(urng.integers(c.n_themes))
        w = pop * (1.0 + c.theme_affinity * np.isin(theme, list(prefs)))
        drawn = np.unique(urng.choice(w, c.interactions_per_user))
        users.extend([u] * len(drawn))
        items.extend(drawn.tolist())

    item_ids = tuple(f"i{k:05d}" for k in range(n))
    corpus = ItemCorpus(text.astype(np.float32), media.astype(np.float32), item_ids)
    table = BundleTable(
        items=tuple(bundles), ids=tuple(f"b{k:05d}" for k in range(c.n_bundles)), item_ids=item_ids
    )
    D = InteractionMatrix(
        n_users=c.n_users,
        n_items=n,
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        user_ids=tuple(f"u{k:05d}" for k in range(c.n_users)),
        item_ids=item_ids,
    )
    return Dataset(corpus, table, D, meta={"theme": theme, "style": style})
