"""Dataset loading, synthetic generation, splitting, padding.

On-disk grammar (tab-separated text, one record per line):

    manifest         optional first line `items<TAB>{catalog_size}`, then one
                     task per line: `{id}<TAB>{kind}<TAB>{metric}<TAB>{label_count}<TAB>{description}`
                     kind is `link` or `classification`; metric is `hr` or `acc`;
                     label_count is 0 for link tasks. The description string
                     carries four fields: task name, input format, output
                     format, evaluation metric.
    sequences        `{user}<TAB>{i1,i2,...}` — the user's interactions,
                     oldest first.
    task{k}.labels   `{user}<TAB>{label}` for every downstream task k >= 2:
                     a class index for classification, an item id for link.
                     Task 1 is self-supervised next-item and has no file.
    item_attrs       optional `{item}<TAB>{attr}` with attr ids >= 1.

When the `items` line is present, ids must lie in [1, catalog_size] and are
kept as-is; otherwise the observed ids are re-indexed densely onto 1..|I|.
Id 0 is reserved for padding everywhere. Padded views are left-padded so the
last positions always hold the most recent real items.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .rng import Rng

KINDS = ("link", "classification")


@dataclass
class TaskSpec:
    """Identity of one task in the stream."""

    id: int
    kind: str
    metric: str        # hr | acc
    label_count: int   # 0 for link tasks
    description: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"task {self.id}: unknown kind {self.kind!r}")
        if self.kind == "link" and self.metric != "hr":
            raise DataError(f"task {self.id}: link tasks use the hr metric")
        if self.kind == "classification" and self.metric != "acc":
            raise DataError(f"task {self.id}: classification tasks use the acc metric")
        if self.kind == "classification" and self.label_count < 2:
            raise DataError(f"task {self.id}: needs >= 2 classes")


@dataclass
class BehaviorSequence:
    """One user's ordered interaction history (most recent last)."""

    user: int
    items: np.ndarray

    def padded(self, n: int) -> np.ndarray:
        return pad_left(self.items, n)


def pad_left(items, n: int) -> np.ndarray:
    """Left-pad (or truncate to the most recent n) into a length-n id row."""
    items = np.asarray(items, dtype=np.int64)[-n:]
    out = np.zeros(n, dtype=np.int64)
    if len(items):
        out[n - len(items):] = items
    return out


@dataclass
class Dataset:
    users: list[int]
    sequences: list[np.ndarray]          # dense item ids, full length, oldest first
    tasks: list[TaskSpec]
    labels: dict[int, np.ndarray]        # task id -> per-user label, aligned with users
    num_items: int
    item_attrs: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    num_attrs: int = 0

    def task_by_id(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise ConfigError(f"unknown task id {task_id}")

    def downstream_tasks(self) -> list[TaskSpec]:
        return [t for t in self.tasks if t.id != 1]


# ---------------------------------------------------------------------------
# loading / writing


def _parse_int(text: str, path, lineno: int, what: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(path, lineno, f"bad {what}: {text!r}") from None


def load_dataset(dir_path) -> Dataset:
    """Load and validate a dataset directory (see module docstring grammar)."""
    dir_path = Path(dir_path)
    manifest = dir_path / "manifest"
    if not manifest.exists():
        raise DataError(f"missing manifest: {manifest}")

    declared_items = None
    tasks: list[TaskSpec] = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "items":
            if len(parts) != 2 or tasks:
                raise ParseError(manifest, lineno, "items line must lead the manifest")
            declared_items = _parse_int(parts[1], manifest, lineno, "item count")
            continue
        if len(parts) != 5:
            raise ParseError(manifest, lineno, f"expected 5 task fields, got {len(parts)}")
        tid = _parse_int(parts[0], manifest, lineno, "task id")
        count = _parse_int(parts[3], manifest, lineno, "label count")
        try:
            tasks.append(TaskSpec(tid, parts[1], parts[2], count, parts[4]))
        except DataError as e:
            raise ParseError(manifest, lineno, str(e)) from None
    if not tasks or tasks[0].id != 1 or tasks[0].kind != "link":
        raise DataError(f"{manifest}: task 1 must exist and be a link task")
    if len({t.id for t in tasks}) != len(tasks):
        raise DataError(f"{manifest}: duplicate task ids")

    seq_path = dir_path / "sequences"
    if not seq_path.exists():
        raise DataError(f"missing sequences file: {seq_path}")
    users: list[int] = []
    raw_seqs: list[np.ndarray] = []
    seen_users = set()
    for lineno, line in enumerate(seq_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(seq_path, lineno, "expected `user<TAB>items`")
        user = _parse_int(parts[0], seq_path, lineno, "user id")
        if user in seen_users:
            raise DataError(f"{seq_path}:{lineno}: duplicate user {user}")
        seen_users.add(user)
        try:
            items = np.array([int(x) for x in parts[1].split(",") if x], dtype=np.int64)
        except ValueError:
            raise ParseError(seq_path, lineno, f"bad item list: {parts[1]!r}") from None
        if len(items) == 0 or (items <= 0).any():
            raise ParseError(seq_path, lineno, "items must be a non-empty list of positive ids")
        users.append(user)
        raw_seqs.append(items)

    user_pos = {u: i for i, u in enumerate(users)}

    raw_labels: dict[int, np.ndarray] = {}
    for task in tasks:
        if task.id == 1:
            continue
        path = dir_path / f"task{task.id}.labels"
        if not path.exists():
            raise DataError(f"missing labels file: {path}")
        values = np.zeros(len(users), dtype=np.int64)
        got = set()
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected `user<TAB>label`")
            user = _parse_int(parts[0], path, lineno, "user id")
            label = _parse_int(parts[1], path, lineno, "label")
            if user not in user_pos:
                raise DataError(f"{path}:{lineno}: unknown user {user}")
            if user in got:
                raise DataError(f"{path}:{lineno}: duplicate label for user {user}")
            got.add(user)
            values[user_pos[user]] = label
        if len(got) != len(users):
            raise DataError(f"{path}: {len(got)} labels for {len(users)} users")
        raw_labels[task.id] = values

    # item universe: sequences plus link-task labels
    observed = set()
    for s in raw_seqs:
        observed.update(int(x) for x in s)
    for task in tasks:
        if task.id != 1 and task.kind == "link":
            observed.update(int(x) for x in raw_labels[task.id])

    if declared_items is not None:
        bad = [i for i in observed if not 1 <= i <= declared_items]
        if bad:
            raise DataError(f"{dir_path}: item ids {sorted(bad)[:5]} outside declared catalog "
                            f"of {declared_items}")
        num_items = declared_items
        remap = None
    else:
        ordered = sorted(observed)
        remap = {raw: i + 1 for i, raw in enumerate(ordered)}
        num_items = len(ordered)

    def to_dense(arr: np.ndarray) -> np.ndarray:
        if remap is None:
            return arr.copy()
        return np.array([remap[int(x)] for x in arr], dtype=np.int64)

    sequences = [to_dense(s) for s in raw_seqs]
    labels: dict[int, np.ndarray] = {}
    for task in tasks:
        if task.id == 1:
            continue
        vals = raw_labels[task.id]
        if task.kind == "link":
            labels[task.id] = to_dense(vals)
        else:
            if (vals < 0).any() or (vals >= task.label_count).any():
                raise DataError(f"task{task.id}.labels: class index outside "
                                f"[0, {task.label_count})")
            labels[task.id] = vals.copy()

    attrs = np.zeros(num_items + 1, dtype=np.int64)
    num_attrs = 0
    attr_path = dir_path / "item_attrs"
    if attr_path.exists():
        for lineno, line in enumerate(attr_path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(attr_path, lineno, "expected `item<TAB>attr`")
            item = _parse_int(parts[0], attr_path, lineno, "item id")
            attr = _parse_int(parts[1], attr_path, lineno, "attr id")
            if attr < 1:
                raise ParseError(attr_path, lineno, "attr ids start at 1")
            dense = remap.get(item) if remap is not None else item
            if dense is None or not 1 <= dense <= num_items:
                raise DataError(f"{attr_path}:{lineno}: unknown item {item}")
            attrs[dense] = attr
            num_attrs = max(num_attrs, attr)

    return Dataset(users, sequences, tasks, labels, num_items, attrs, num_attrs)


def write_dataset(dataset: Dataset, dir_path) -> None:
    """Write a dataset in the documented text grammar."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    lines = [f"items\t{dataset.num_items}"]
    for t in dataset.tasks:
        lines.append(f"{t.id}\t{t.kind}\t{t.metric}\t{t.label_count}\t{t.description}")
    (dir_path / "manifest").write_text("\n".join(lines) + "\n")
    with open(dir_path / "sequences", "w") as f:
        for user, items in zip(dataset.users, dataset.sequences):
            f.write(f"{user}\t{','.join(str(int(i)) for i in items)}\n")
    for task in dataset.tasks:
        if task.id == 1:
            continue
        with open(dir_path / f"task{task.id}.labels", "w") as f:
            for user, label in zip(dataset.users, dataset.labels[task.id]):
                f.write(f"{user}\t{int(label)}\n")
    if dataset.num_attrs:
        with open(dir_path / "item_attrs", "w") as f:
            for item in range(1, dataset.num_items + 1):
                if dataset.item_attrs[item]:
                    f.write(f"{item}\t{int(dataset.item_attrs[item])}\n")


def dataset_fingerprint(dir_path) -> str:
    """sha256 over the dataset files, stable across runs."""
    dir_path = Path(dir_path)
    h = hashlib.sha256()
    for path in sorted(dir_path.iterdir()):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# splits


@dataclass
class LeaveOneOutSplit:
    """Per-user next-item protocol: last item tests, second-to-last validates."""

    kept: np.ndarray            # indices into dataset.users that survived
    train_contexts: np.ndarray  # (U, n) left-padded, items[:-2]
    val_contexts: np.ndarray    # (U, n) same contexts as train
    val_targets: np.ndarray     # (U,)   items[-2]
    test_contexts: np.ndarray   # (U, n) items[:-1]
    test_targets: np.ndarray    # (U,)   items[-1]


def leave_one_out(dataset: Dataset, n: int, strict: bool = False) -> LeaveOneOutSplit:
    kept, train_c, val_t, test_c, test_t = [], [], [], [], []
    for idx, items in enumerate(dataset.sequences):
        if len(items) < 3:
            if strict:
                raise DataError(f"user {dataset.users[idx]} has {len(items)} < 3 interactions")
            continue
        kept.append(idx)
        train_c.append(pad_left(items[:-2], n))
        val_t.append(items[-2])
        test_c.append(pad_left(items[:-1], n))
        test_t.append(items[-1])
    if not kept:
        raise DataError("no user has >= 3 interactions")
    train_c = np.stack(train_c)
    return LeaveOneOutSplit(np.array(kept), train_c, train_c,
                            np.array(val_t), np.stack(test_c), np.array(test_t))


def fraction_split(num_users: int, rng: Rng, fracs=(0.8, 0.1, 0.1)):
    """Disjoint, exhaustive user-index split (train, val, test)."""
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fracs}")
    perm = rng.permutation(num_users)
    n_train = int(num_users * fracs[0])
    n_val = int(num_users * fracs[1])
    return (np.sort(perm[:n_train]),
            np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


def exclusion_sets(contexts: np.ndarray) -> list[frozenset]:
    """Per-user candidate exclusions: the items already in the context."""
    return [frozenset(int(i) for i in row if i != 0) for row in contexts]


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SynthTask:
    kind: str   # link | classification
    rule: str   # markov_next | majority_cat:W | lag_cat:W | home_cat
    noise: float = 0.0

    def window(self) -> int:
        if self.rule.startswith(("majority_cat:", "lag_cat:")):
            return int(self.rule.split(":")[1])
        return 1


@dataclass
class SyntheticSpec:
    """Planted Markov item process with rule-derived downstream labels.

    Items are grouped into contiguous category blocks. Each user has a home
    category; every step picks the home category with p_home, keeps the
    current one with p_stay, otherwise jumps uniformly, then draws an item
    uniformly inside the chosen category.
    """

    num_users: int
    num_items: int
    n: int
    tasks: list[SynthTask]
    num_categories: int = 10
    p_home: float = 0.3
    p_stay: float = 0.5
    len_min: int = 10
    len_max: int = 0          # defaults to n + 2
    seed: int = 0
    fusion_window: int = 0    # when set, every rule window must fit inside it

    def __post_init__(self):
        if self.len_max == 0:
            self.len_max = self.n + 2
        if self.len_min < 3:
            raise ConfigError("len_min must be >= 3 for the next-item protocol")
        if self.num_categories > self.num_items:
            raise ConfigError("more categories than items")
        if self.fusion_window:
            for i, t in enumerate(self.tasks):
                if t.window() > self.fusion_window:
                    raise ConfigError(f"task {i + 2} rule window {t.window()} exceeds "
                                      f"fusion window {self.fusion_window}")


def item_category(item: int, num_items: int, num_categories: int) -> int:
    return (item - 1) * num_categories // num_items


def _category_items(cat: int, num_items: int, num_categories: int) -> tuple[int, int]:
    lo = cat * num_items // num_categories + 1
    hi = (cat + 1) * num_items // num_categories
    return lo, hi


_DESCRIPTIONS = {
    "t1": ("name: next item prediction; input: the user's recent item sequence; "
           "output: the next item the user interacts with; metric: hit ratio at 5 and 10"),
    "markov_next": ("name: next preferred item prediction; input: the user's recent item "
                    "sequence; output: one item from the catalog the user will engage with "
                    "next; metric: hit ratio at 5 and 10"),
    "majority_cat": ("name: dominant recent category classification; input: the user's "
                     "recent item sequence; output: the most frequent category among the "
                     "{w} most recent items; metric: accuracy"),
    "lag_cat": ("name: recent category recall classification; input: the user's recent "
                "item sequence; output: the category of the item {w} steps back; "
                "metric: accuracy"),
    "home_cat": ("name: user profile category classification; input: the user's recent "
                 "item sequence; output: the user's long-term preferred category; "
                 "metric: accuracy"),
}


def _describe(task: SynthTask) -> str:
    base = task.rule.split(":")[0]
    return _DESCRIPTIONS[base].format(w=task.window())


def _markov_step(current_cat: int, home: int, spec: SyntheticSpec, stream: Rng) -> int:
    r = stream.uniform()
    if r < spec.p_home:
        cat = home
    elif r < spec.p_home + spec.p_stay:
        cat = current_cat
    else:
        cat = stream.integers(0, spec.num_categories)
    lo, hi = _category_items(cat, spec.num_items, spec.num_categories)
    return stream.integers(lo, hi + 1)


def _rule_label(task: SynthTask, context: np.ndarray, home: int,
                spec: SyntheticSpec, stream: Rng) -> int:
    C, V = spec.num_categories, spec.num_items
    rule = task.rule
    if rule == "home_cat":
        label = home
    elif rule.startswith("lag_cat:"):
        w = task.window()
        item = context[-w] if len(context) >= w else context[0]
        label = item_category(int(item), V, C)
    elif rule.startswith("majority_cat:"):
        w = task.window()
        cats = [item_category(int(i), V, C) for i in context[-w:]]
        counts = np.bincount(cats, minlength=C)
        best = counts.max()
        winners = set(np.flatnonzero(counts == best))
        last = cats[-1]
        label = last if last in winners else min(winners)
    elif rule == "markov_next":
        last = int(context[-1])
        label = _markov_step(item_category(last, V, C), home, spec, stream)
    else:
        raise ConfigError(f"unknown rule {rule!r}")
    if task.noise > 0 and stream.uniform() < task.noise:
        if task.kind == "link":
            label = stream.integers(1, V + 1)
        else:
            label = stream.integers(0, C)
    return int(label)


def rule_oracle_label(task: SynthTask, context: np.ndarray, home: int,
                      spec: SyntheticSpec) -> int:
    """Noise-free label for deterministic rules; used as a test oracle."""
    if task.rule == "markov_next":
        raise ConfigError("markov_next has no deterministic oracle")
    clean = SynthTask(task.kind, task.rule, 0.0)
    return _rule_label(clean, context, home, spec, Rng(0))


def synth_generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic dataset from the planted process."""
    root = Rng(spec.seed)
    users = list(range(1, spec.num_users + 1))
    homes = np.array([root.child(f"user{u}.home").integers(0, spec.num_categories)
                      for u in users])
    sequences = []
    for u, home in zip(users, homes):
        stream = root.child(f"user{u}.seq")
        length = stream.integers(spec.len_min, spec.len_max + 1)
        lo, hi = _category_items(int(home), spec.num_items, spec.num_categories)
        items = [stream.integers(lo, hi + 1)]
        for _ in range(length - 1):
            cat = item_category(items[-1], spec.num_items, spec.num_categories)
            items.append(_markov_step(cat, int(home), spec, stream))
        sequences.append(np.array(items, dtype=np.int64))

    tasks = [TaskSpec(1, "link", "hr", 0, _DESCRIPTIONS["t1"])]
    labels: dict[int, np.ndarray] = {}
    for i, st in enumerate(spec.tasks):
        tid = i + 2
        metric = "hr" if st.kind == "link" else "acc"
        count = 0 if st.kind == "link" else spec.num_categories
        tasks.append(TaskSpec(tid, st.kind, metric, count, _describe(st)))
        stream = root.child(f"task{tid}.labels")
        vals = []
        for items, home in zip(sequences, homes):
            context = items[:-2][-spec.n:]
            vals.append(_rule_label(st, context, int(home), spec, stream))
        labels[tid] = np.array(vals, dtype=np.int64)

    attrs = np.array([0] + [item_category(i, spec.num_items, spec.num_categories) + 1
                            for i in range(1, spec.num_items + 1)], dtype=np.int64)
    return Dataset(users, sequences, tasks, labels, spec.num_items,
                   attrs, spec.num_categories)


def standard_suite(seed: int = 0, num_users: int = 500, num_items: int = 200,
                   n: int = 20, fusion_window: int = 5) -> SyntheticSpec:
    """The desk-scale evaluation suite: one link and two classification tasks.

    Task 3 reads a specific recent position (inside any fusion window >= 3),
    task 4 is a long-horizon user profile; both share the category structure,
    so they are correlated.
    """
    return SyntheticSpec(
        num_users=num_users,
        num_items=num_items,
        n=n,
        tasks=[
            SynthTask("link", "markov_next", noise=0.0),
            SynthTask("classification", "lag_cat:3", noise=0.1),
            SynthTask("classification", "home_cat", noise=0.05),
        ],
        num_categories=10,
        seed=seed,
        fusion_window=fusion_window,
    )


# ---------------------------------------------------------------------------
# cold start


def mask_cold_start(dataset: Dataset, fraction: float, seed: int,
                    strict: bool = False) -> tuple[Dataset, np.ndarray]:
    """Remove a seeded item fraction from the pretraining sequences.

    Returns the masked dataset (for task 1 only) and the cold item ids. In
    lenient mode users whose masked sequence drops below 3 interactions are
    dropped from the masked view; strict mode raises instead.
    """
    if not 0 <= fraction < 1:
        raise ConfigError(f"cold fraction must be in [0, 1), got {fraction}")
    if fraction == 0:
        return dataset, np.array([], dtype=np.int64)
    count = int(dataset.num_items * fraction)
    cold = np.sort(Rng(seed).child("cold_items").sample_without_replacement(
        np.arange(1, dataset.num_items + 1), count))
    cold_set = frozenset(int(i) for i in cold)

    users, sequences = [], []
    for user, items in zip(dataset.users, dataset.sequences):
        kept = np.array([i for i in items if int(i) not in cold_set], dtype=np.int64)
        if len(kept) < 3:
            if strict:
                raise DataError(f"user {user}: masking leaves {len(kept)} < 3 interactions")
            continue
        users.append(user)
        sequences.append(kept)
    if not users:
        raise DataError("cold-start masking removed every user")
    masked = Dataset(users, sequences, [dataset.tasks[0]], {}, dataset.num_items,
                     dataset.item_attrs.copy(), dataset.num_attrs)
    return masked, cold
