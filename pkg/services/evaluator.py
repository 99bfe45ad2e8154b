"""
Evaluation: descriptor databases, exhaustive retrieval, Recall@N / AR@1%, the
active-triplet diagnostic and the tab-separated report format.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from config import EvaluationConfig, LossConfig, QuantizationConfig
from dataset.dataset import Dataset
from errors import ArtifactMismatchError, DataError, NumericError, ShapeMismatchError
from models.network import ModelInput, PlaceRecognitionNet
from models.tensor import no_grad
from services.batching import PlaceGroupSampler, collate, load_sample, load_samples, positions_of
from services.losses import head_loss, similarity_masks

logger = logging.getLogger(__name__)

REPORT_HEADER = 'metric\tn\tvalue'
ACTIVE_BLOCK = '[active_triplets]'
RANKING_HEADER = 'query\trank\tid\tdistance'


@dataclass
class DescriptorDatabase:
    """Immutable (id, position, descriptor) entries with uniform descriptor width."""
    ids: Tuple[str, ...]
    positions: np.ndarray
    descriptors: np.ndarray
    traversals: Optional[np.ndarray] = None
    id_rank: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.ids = tuple(self.ids)
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.array(self.descriptors, dtype=np.float64)
        if self.descriptors.ndim != 2:
            raise ShapeMismatchError(f"descriptor matrix must be 2D, got shape {self.descriptors.shape}")
        if not (len(self.ids) == len(self.positions) == len(self.descriptors)):
            raise ShapeMismatchError("ids, positions and descriptors differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("descriptor database ids must be unique")
        if self.traversals is not None:
            self.traversals = np.asarray(self.traversals, dtype=np.int64)
        self.id_rank = np.argsort(np.argsort(np.array(self.ids, dtype=str), kind='stable'), kind='stable')
        for array in (self.positions, self.descriptors):
            array.setflags(write=False)

    @property
    def width(self) -> int:
        return int(self.descriptors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def select(self, mask: np.ndarray) -> 'DescriptorDatabase':
        rows = np.nonzero(mask)[0]
        return DescriptorDatabase(
            tuple(self.ids[i] for i in rows), self.positions[rows], self.descriptors[rows],
            None if self.traversals is None else self.traversals[rows])


# ---------------------------------------------------------------------------
# Database construction
# ---------------------------------------------------------------------------

def element_descriptor(model: PlaceRecognitionNet, dataset: Dataset, index: int, head: str,
                       quantization: QuantizationConfig) -> np.ndarray:
    """One eval-mode forward pass of a single element (no augmentation, image variant 0)."""
    with no_grad():
        sample = load_sample(dataset, index, model.uses_clouds, model.uses_images, None, None)
        descriptor = model(collate([sample], quantization)).head(head)
    if descriptor is None:
        raise ArtifactMismatchError(f"model with modality {model.modality!r} has no {head!r} descriptor")
    values = np.asarray(descriptor.values[0], dtype=np.float64)
    if np.any(np.isnan(values)):
        raise NumericError(f"descriptor of element {dataset[index].id} contains NaN")
    return values


def build_database(model: PlaceRecognitionNet, dataset: Dataset, head: str = 'fused',
                   quantization: Optional[QuantizationConfig] = None, threads: int = 1,
                   progress: bool = False) -> DescriptorDatabase:
    """Descriptors of every element, computed in eval mode; thread count never changes the result."""
    if len(dataset) == 0:
        raise DataError("cannot build a descriptor database from an empty element list")
    quantization = quantization or QuantizationConfig()
    was_training = model.training
    model.eval()
    try:
        def job(index: int) -> np.ndarray:
            return element_descriptor(model, dataset, index, head, quantization)

        indices = range(len(dataset))
        if threads <= 1:
            rows = [job(i) for i in tqdm(indices, desc='descriptors', disable=not progress, leave=False)]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rows = list(tqdm(pool.map(job, indices), total=len(dataset), desc='descriptors',
                                 disable=not progress, leave=False))
    finally:
        model.train(was_training)
    return DescriptorDatabase(
        tuple(e.id for e in dataset.elements), dataset.positions(), np.stack(rows),
        np.array([e.traversal for e in dataset.elements]))


# ---------------------------------------------------------------------------
# Retrieval and metrics
# ---------------------------------------------------------------------------

def rank_entries(db: DescriptorDatabase, descriptor: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry indices by ascending Euclidean distance (ties by id), and the sorted distances."""
    descriptor = np.asarray(descriptor, dtype=np.float64).reshape(-1)
    if descriptor.shape[0] != db.width:
        raise ShapeMismatchError(f"query descriptor width {descriptor.shape[0]} != database width {db.width}")
    diff = db.descriptors - descriptor
    distances = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((db.id_rank, distances))
    return order, distances[order]


def query_top_n(db: DescriptorDatabase, descriptor: np.ndarray, n: int) -> List[str]:
    if n < 1:
        raise ValueError("n must be >= 1")
    order, _ = rank_entries(db, descriptor)
    return [db.ids[i] for i in order[:n]]


def _check_queries(db: DescriptorDatabase, queries: DescriptorDatabase) -> None:
    if len(queries) == 0:
        raise DataError("recall needs at least one query")
    if len(db) == 0:
        raise DataError("recall needs a nonempty database")
    if queries.width != db.width:
        raise ShapeMismatchError(f"query width {queries.width} != database width {db.width}")


def hit_ranks(db: DescriptorDatabase, queries: DescriptorDatabase, radius_m: float = 25.0) -> np.ndarray:
    """Per query, the 1-based rank of the first entry within radius_m (0 when none is)."""
    _check_queries(db, queries)
    ranks = np.zeros(len(queries), dtype=np.int64)
    for q in range(len(queries)):
        order, _ = rank_entries(db, queries.descriptors[q])
        diff = db.positions[order] - queries.positions[q]
        hits = np.nonzero(np.sqrt(np.sum(diff * diff, axis=1)) <= radius_m)[0]
        if len(hits):
            ranks[q] = hits[0] + 1
    return ranks


def recall_at_n(db: DescriptorDatabase, queries: DescriptorDatabase, n: int, radius_m: float = 25.0) -> float:
    """Fraction of queries with a true match (within radius_m) among their top n entries."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ranks = hit_ranks(db, queries, radius_m)
    return float(np.count_nonzero((ranks > 0) & (ranks <= n))) / len(queries)


def one_percent_cutoff(db_size: int) -> int:
    return max(1, db_size // 100)


def ar_at_1pct(db: DescriptorDatabase, queries: DescriptorDatabase, radius_m: float = 25.0) -> float:
    return recall_at_n(db, queries, one_percent_cutoff(len(db)), radius_m)


@dataclass
class EvaluationResult:
    protocol: str
    head: str
    recalls: Dict[int, float]
    ar_1pct: float
    ar_n: int
    queries: int
    database: int
    rankings: Optional[str] = None

    def rows(self) -> List[Tuple[str, int, float]]:
        rows = [('recall', n, value) for n, value in sorted(self.recalls.items())]
        rows.append(('ar_1pct', self.ar_n, self.ar_1pct))
        return rows


def recall_summary(db: DescriptorDatabase, queries: DescriptorDatabase,
                   cfg: EvaluationConfig) -> Tuple[Dict[int, float], float, int]:
    ranks = hit_ranks(db, queries, cfg.radius_m)
    hit = ranks > 0
    recalls = {n: float(np.count_nonzero(hit & (ranks <= n))) / len(queries) for n in cfg.recall_ns}
    cutoff = one_percent_cutoff(len(db))
    return recalls, float(np.count_nonzero(hit & (ranks <= cutoff))) / len(queries), cutoff


def format_rankings(db: DescriptorDatabase, queries: DescriptorDatabase, top: int = 25) -> str:
    lines = [RANKING_HEADER]
    for q, query_id in enumerate(queries.ids):
        order, distances = rank_entries(db, queries.descriptors[q])
        for rank, (i, d) in enumerate(zip(order[:top], distances[:top]), 1):
            lines.append(f"{query_id}\t{rank}\t{db.ids[i]}\t{d:.9f}")
    return '\n'.join(lines) + '\n'


def evaluate_held_out(model: PlaceRecognitionNet, eval_set: Dataset, cfg: EvaluationConfig,
                      query_traversal: int = -1, head: str = 'fused',
                      quantization: Optional[QuantizationConfig] = None, threads: int = 1,
                      progress: bool = False, dump_rankings: bool = False) -> EvaluationResult:
    """Queries from one traversal against a database of all the others."""
    held_out = eval_set.resolve_traversal(query_traversal)
    database_set = eval_set.excluding_traversal(held_out)
    query_set = eval_set.by_traversal(held_out)
    if len(database_set) == 0:
        raise DataError(f"no database elements outside query traversal {held_out}")
    db = build_database(model, database_set, head, quantization, threads, progress)
    queries = build_database(model, query_set, head, quantization, threads, progress)
    recalls, ar, cutoff = recall_summary(db, queries, cfg)
    logger.info("held-out traversal %d: %d queries against %d entries, recall@1 %.4f",
                held_out, len(queries), len(db), recalls.get(1, float('nan')))
    rankings = format_rankings(db, queries, cfg.dump_top) if dump_rankings else None
    return EvaluationResult('held-out', head, recalls, ar, cutoff, len(queries), len(db), rankings)


def average_recall(all_entries: DescriptorDatabase, cfg: EvaluationConfig) -> EvaluationResult:
    """Each traversal in turn queries every other traversal; metrics are averaged over the ordered pairs."""
    if all_entries.traversals is None:
        raise DataError("all-pairs protocol needs traversal labels")
    traversals = sorted(set(all_entries.traversals.tolist()))
    if len(traversals) < 2:
        raise DataError("all-pairs protocol needs at least two traversals")
    sums = {n: 0.0 for n in cfg.recall_ns}
    ar_sum, pairs, cutoff, n_queries = 0.0, 0, 1, 0
    for q in traversals:
        queries = all_entries.select(all_entries.traversals == q)
        for d in traversals:
            if d == q:
                continue
            db = all_entries.select(all_entries.traversals == d)
            recalls, ar, cutoff = recall_summary(db, queries, cfg)
            for n, value in recalls.items():
                sums[n] += value
            ar_sum += ar
            pairs += 1
            n_queries += len(queries)
    return EvaluationResult('all-pairs', 'fused', {n: s / pairs for n, s in sums.items()}, ar_sum / pairs,
                            cutoff, n_queries, len(all_entries))


def evaluate_all_pairs(model: PlaceRecognitionNet, eval_set: Dataset, cfg: EvaluationConfig,
                       head: str = 'fused', quantization: Optional[QuantizationConfig] = None,
                       threads: int = 1, progress: bool = False) -> EvaluationResult:
    result = average_recall(build_database(model, eval_set, head, quantization, threads, progress), cfg)
    result.head = head
    return result


# ---------------------------------------------------------------------------
# Active-triplet diagnostic
# ---------------------------------------------------------------------------

@dataclass
class ActiveTripletReport:
    """Mean active triplets per batch on each unimodal descriptor space."""
    pc_train: float
    rgb_train: float
    pc_val: float
    rgb_val: float
    train_batches: int
    val_batches: int

    @property
    def train_delta(self) -> float:
        return self.rgb_train - self.pc_train

    @property
    def val_delta(self) -> float:
        return self.rgb_val - self.pc_val


@dataclass
class DiagnosticBatch:
    inputs: ModelInput
    positions: np.ndarray


def sample_batches(dataset: Dataset, n_batches: int, batch_size: int, seed: int,
                   quantization: Optional[QuantizationConfig] = None, loss: Optional[LossConfig] = None,
                   threads: int = 1, anchor_traversal: Optional[int] = None) -> List[DiagnosticBatch]:
    """Place-group batches without augmentation, image variant 0.

    With anchor_traversal, positive pairs join that traversal to another one.
    """
    quantization = quantization or QuantizationConfig()
    loss = loss or LossConfig()
    anchors = None
    if anchor_traversal is not None:
        anchors = np.array([e.traversal == anchor_traversal for e in dataset.elements])
    sampler = PlaceGroupSampler(dataset.positions(), loss.positive_radius_m, anchor_mask=anchors)
    rng = np.random.default_rng([seed, n_batches, batch_size])
    batches = []
    for b in range(n_batches):
        samples = load_samples(dataset, sampler.sample(batch_size, rng), True, True, None,
                               seed=seed, batch=b, threads=threads)
        batches.append(DiagnosticBatch(collate(samples, quantization), positions_of(samples)))
    return batches


def count_active(model: PlaceRecognitionNet, batches: Sequence[DiagnosticBatch],
                 loss: LossConfig) -> Tuple[float, float]:
    """Mean active triplets per batch on D_PC and D_RGB, mined separately in each space."""
    pc_total = rgb_total = 0
    for batch in batches:
        with no_grad():
            descriptors = model(batch.inputs)
        positive, negative = similarity_masks(batch.positions, loss.positive_radius_m, loss.negative_radius_m)
        pc_total += head_loss(descriptors.pc, positive, negative, loss.margin).active
        rgb_total += head_loss(descriptors.rgb, positive, negative, loss.margin).active
    n = max(len(batches), 1)
    return pc_total / n, rgb_total / n


def modality_diagnostic(model: PlaceRecognitionNet, train_batches: Sequence[DiagnosticBatch],
                        val_batches: Sequence[DiagnosticBatch], loss: LossConfig) -> ActiveTripletReport:
    """Count active triplets per modality on train and validation batches; no parameters or buffers change."""
    if model.modality != 'fused':
        raise ArtifactMismatchError(f"the diagnostic needs a fused model, checkpoint has modality {model.modality!r}")
    was_training = model.training
    model.eval()
    try:
        pc_train, rgb_train = count_active(model, train_batches, loss)
        pc_val, rgb_val = count_active(model, val_batches, loss)
    finally:
        model.train(was_training)
    return ActiveTripletReport(pc_train, rgb_train, pc_val, rgb_val, len(train_batches), len(val_batches))


# ---------------------------------------------------------------------------
# Report format
# ---------------------------------------------------------------------------

def format_active_block(report: ActiveTripletReport) -> str:
    lines = [
        ACTIVE_BLOCK,
        'split\tpc\trgb\tdelta',
        f"train\t{report.pc_train:.6f}\t{report.rgb_train:.6f}\t{report.train_delta:.6f}",
        f"val\t{report.pc_val:.6f}\t{report.rgb_val:.6f}\t{report.val_delta:.6f}",
        f"batches\t{report.train_batches}\t{report.val_batches}",
    ]
    return '\n'.join(lines) + '\n'


def format_report(result: Optional[EvaluationResult] = None,
                  diagnostic: Optional[ActiveTripletReport] = None) -> str:
    parts = []
    if result is not None:
        lines = [f"# protocol\t{result.protocol}", f"# head\t{result.head}",
                 f"# queries\t{result.queries}", f"# database\t{result.database}", REPORT_HEADER]
        lines += [f"{metric}\t{n}\t{value:.6f}" for metric, n, value in result.rows()]
        parts.append('\n'.join(lines) + '\n')
    if diagnostic is not None:
        parts.append(format_active_block(diagnostic))
    return '\n'.join(parts)


@dataclass
class ParsedReport:
    metrics: Dict[Tuple[str, int], float] = field(default_factory=dict)
    active: Optional[ActiveTripletReport] = None


def parse_report(text: str) -> ParsedReport:
    """Read back the metric rows and the active-triplet block written by format_report."""
    parsed = ParsedReport()
    in_active = False
    active: Dict[str, List[str]] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith('#'):
            continue
        if line == ACTIVE_BLOCK:
            in_active = True
            continue
        fields = line.split('\t')
        if in_active:
            active[fields[0]] = fields[1:]
            continue
        if line == REPORT_HEADER:
            continue
        if len(fields) != 3:
            raise DataError(f"report line {line_no}: expected metric, n, value")
        try:
            parsed.metrics[(fields[0], int(fields[1]))] = float(fields[2])
        except ValueError as e:
            raise DataError(f"report line {line_no}: {e}") from e
    if in_active:
        try:
            parsed.active = ActiveTripletReport(
                float(active['train'][0]), float(active['train'][1]),
                float(active['val'][0]), float(active['val'][1]),
                int(active['batches'][0]), int(active['batches'][1]))
        except (KeyError, IndexError, ValueError) as e:
            raise DataError(f"malformed active-triplet block: {e}") from e
    return parsed
