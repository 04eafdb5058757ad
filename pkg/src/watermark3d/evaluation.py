"""Detection metrics and the experiment drivers (cross validation, holdout,
cross-material, active learning, bit-position correlation)."""

import csv
import io
import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field, is_dataclass

import numpy as np

from .codec import InformationMatrix
from .errors import PipelineStageError, ShapeMismatchError
from .model import Cnn3dwModel, TrainConfig, forward, train
from .netpbm import read_pnm, to_float
from .render import ObjectPlan, generate_objects
from .retrieval import RetrievalConfig, decode_confidence_map, majority_vote

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fn + other.fn,
                               self.tn + other.tn, self.fp + other.fp)

    @staticmethod
    def _ratio(num, den):
        return num / den if den else None

    @property
    def tpr(self):
        return self._ratio(self.tp, self.tp + self.fn)

    @property
    def spc(self):
        return self._ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self):
        return self._ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self):
        return self._ratio(self.tn, self.tn + self.fn)

    @property
    def fnr(self):
        return self._ratio(self.fn, self.tp + self.fn)

    @property
    def fpr(self):
        return self._ratio(self.fp, self.tn + self.fp)

    @property
    def accuracy(self):
        return self._ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)


def score(truth, decoded):
    if truth.m != decoded.m:
        raise ShapeMismatchError(f"matrix sizes differ: {truth.m} vs {decoded.m}")
    t = truth.bits.astype(bool)
    d = decoded.bits.astype(bool)
    return ConfusionCounts(tp=int((t & d).sum()), fn=int((t & ~d).sum()),
                           tn=int((~t & ~d).sum()), fp=int((~t & d).sum()))


def bit_position_correlation(per_bit_accuracy, m=None):
    """Pearson r between each cell's accuracy and its distance from the matrix centre.

    Returns None when either variable has zero variance.
    """
    acc = np.asarray(per_bit_accuracy, dtype=float)
    m = m or acc.shape[0]
    if acc.shape != (m, m):
        raise ShapeMismatchError(f"expected an {m}x{m} accuracy grid")
    c = (m - 1) / 2.0
    i, j = np.mgrid[0:m, 0:m]
    dist = np.hypot(i - c, j - c).ravel()
    a = acc.ravel()
    da, dd = a - a.mean(), dist - dist.mean()
    if np.ptp(a) <= 1e-12 * max(1.0, np.abs(a).max()) or np.ptp(dist) == 0:
        return None
    den = np.sqrt((da * da).sum() * (dd * dd).sum())
    return float(np.clip((da * dd).sum() / den, -1.0, 1.0))


# -- per-image evaluation ----------------------------------------------------

@dataclass
class ImageResult:
    id: str
    object_id: int
    material: str
    illumination: str
    truth: InformationMatrix
    decoded: InformationMatrix
    counts: ConfusionCounts
    failed_stage: str = None


def load_truth(rec):
    with open(os.path.join(rec.get("_base", "."), rec["matrix_file"])) as fh:
        return InformationMatrix.from_text(fh.read())


def load_image(rec):
    return to_float(read_pnm(os.path.join(rec.get("_base", "."), rec["image_file"])))


def evaluate_records(model, records, retrieval=RetrievalConfig()):
    """Run the full retrieval on every record; failures decode to all zeros."""
    results = []
    for rec in records:
        truth = load_truth(rec)
        img = load_image(rec)
        failed = None
        try:
            conf = forward(model, img)
            decoded, _ = decode_confidence_map(conf, img, retrieval)
        except PipelineStageError as exc:
            failed = exc.stage
            decoded = InformationMatrix(np.zeros_like(truth.bits))
            log.warning("%s: %s", rec["id"], exc)
        results.append(ImageResult(rec["id"], rec["object_id"], rec.get("material", ""),
                                   rec.get("illumination", ""), truth, decoded,
                                   score(truth, decoded), failed))
    return results


def per_bit_accuracy(results):
    hits = np.sum([(r.truth.bits == r.decoded.bits) for r in results], axis=0)
    return hits / len(results)


# -- reports -----------------------------------------------------------------

RATES = ("tpr", "spc", "ppv", "npv", "accuracy")


@dataclass
class ReportRow:
    group: str
    metric: str
    n: int
    values: dict

    def rate(self, name):
        return self.values.get(name)


def mean_rates(counts_list):
    out = {}
    for name in RATES:
        vals = [getattr(c, name) for c in counts_list]
        vals = [v for v in vals if v is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def average_row(group, results, metric="Average"):
    return ReportRow(group, metric, len(results), mean_rates([r.counts for r in results]))


def vote_row(group, results):
    decoded, _ = majority_vote([r.decoded for r in results])
    c = score(results[0].truth, decoded)
    return ReportRow(group, "Majority Vote", len(results), {n: getattr(c, n) for n in RATES})


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class ExperimentReport:
    name: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def find(self, group, metric="Average"):
        for row in self.rows:
            if row.group == group and row.metric == metric:
                return row
        raise KeyError((group, metric))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "metric", "n", *RATES])
        for row in self.rows:
            w.writerow([row.group, row.metric, row.n, *(_fmt(row.values.get(k)) for k in RATES)])
        return buf.getvalue()

    def to_text(self):
        width = max([len(r.group) for r in self.rows] + [5])
        lines = [self.name, f"{'group':<{width}}  {'metric':<13}  n    "
                 + "  ".join(f"{k.upper():>8}" for k in RATES)]
        for row in self.rows:
            lines.append(f"{row.group:<{width}}  {row.metric:<13}  {row.n:<3}  "
                         + "  ".join(f"{_fmt(row.values.get(k)):>8}" for k in RATES))
        for key in sorted(self.extras):
            val = self.extras[key]
            if isinstance(val, float):
                val = _fmt(val)
            if not isinstance(val, (list, dict)):
                lines.append(f"{key}: {val}")
        return "\n".join(lines) + "\n"

    def config_json(self):
        return json.dumps(_jsonable(self.config), sort_keys=True, indent=2)

    def write(self, out_dir, stem=None):
        """Write ``stem``.csv, .txt, .config.json and .extras.json; returns the paths."""
        stem = stem or self.name
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        extras = json.dumps(_jsonable(self.extras), sort_keys=True, indent=2)
        for ext, text in (("csv", self.to_csv()), ("txt", self.to_text()),
                          ("config.json", self.config_json()), ("extras.json", extras)):
            paths[ext] = os.path.join(out_dir, f"{stem}.{ext}")
            with open(paths[ext], "w") as fh:
                fh.write(text)
        return paths


# -- experiment drivers ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = TrainConfig()
    retrieval: RetrievalConfig = RetrievalConfig()
    model_seed: int = 0


def _image_index(rec):
    return int(rec["id"].rsplit("_", 1)[1])


def cv_folds(records, folds=5):
    """Per object: fold f tests natural images 2f, 2f+1 and artificial image f.

    Returns a list of ``folds`` lists of record ids.
    """
    by_obj = defaultdict(lambda: {"natural": [], "extreme_artificial": []})
    for rec in records:
        by_obj[rec["object_id"]][rec["illumination"]].append(rec)
    out = [[] for _ in range(folds)]
    for obj in sorted(by_obj):
        nat = sorted(by_obj[obj]["natural"], key=_image_index)
        art = sorted(by_obj[obj]["extreme_artificial"], key=_image_index)
        if len(nat) != 2 * folds or len(art) != folds:
            raise ValueError(
                f"object {obj} has {len(nat)} natural / {len(art)} artificial images;"
                f" need {2 * folds} / {folds}"
            )
        for f in range(folds):
            out[f] += [nat[2 * f]["id"], nat[2 * f + 1]["id"], art[f]["id"]]
    return out


def fit_model(records, cfg=ExperimentConfig(), label="model"):
    """Train a fresh model on ``records`` (all used for training)."""
    model = Cnn3dwModel(channels=cfg.train.channels, kernels=cfg.train.kernels,
                        seed=cfg.model_seed)
    recs = [dict(r, split="train") for r in records]
    log.info("training %s on %d images", label, len(recs))
    result = train(model, recs, cfg.train)
    return model, result.losses


def run_cross_validation(records, cfg=ExperimentConfig(), folds=5, fold_indices=None):
    """K-fold cross-validation over images. ``fold_indices`` restricts which folds are run."""
    fold_ids = cv_folds(records, folds)
    fold_indices = range(folds) if fold_indices is None else fold_indices
    by_id = {r["id"]: r for r in records}
    results, losses, checksums = [], {}, {}
    for f in fold_indices:
        test = set(fold_ids[f])
        model, losses[f] = fit_model([r for r in records if r["id"] not in test], cfg, f"fold {f}")
        checksums[str(f)] = model.checksum()
        results += evaluate_records(model, [by_id[i] for i in fold_ids[f]], cfg.retrieval)
    results.sort(key=lambda r: r.id)

    report = ExperimentReport("cv5", config={"experiment": cfg, "folds": folds,
                                             "fold_indices": list(fold_indices)})
    by_obj = defaultdict(list)
    for r in results:
        by_obj[r.object_id].append(r)
    for obj in sorted(by_obj):
        report.rows.append(average_row(f"object {obj} ({by_obj[obj][0].material})", by_obj[obj]))
    report.rows.append(average_row("all", results))
    for illum, label in (("natural", "Natural light"),
                         ("extreme_artificial", "Extreme artificial light")):
        sel = [r for r in results if r.illumination == illum]
        if sel:
            report.rows.append(average_row(label, sel))
    acc = per_bit_accuracy(results)
    report.extras["pearson_accuracy_vs_centre_distance"] = bit_position_correlation(acc)
    report.extras["per_bit_accuracy"] = acc.round(6).tolist()
    report.extras["failed_images"] = sorted(r.id for r in results if r.failed_stage)
    report.extras["final_train_loss"] = {str(k): v[-1] for k, v in losses.items()}
    report.extras["fold_test_ids"] = {str(f): fold_ids[f] for f in fold_indices}
    report.extras["model_checksums"] = checksums
    report.results = results
    return report


def _holdout_rows(report, results):
    by_obj = defaultdict(list)
    for r in results:
        by_obj[r.object_id].append(r)
    for obj in sorted(by_obj):
        group = f"object {obj} ({by_obj[obj][0].material})"
        report.rows.append(average_row(group, by_obj[obj]))
        report.rows.append(vote_row(group, by_obj[obj]))


def run_holdout(records, train_objects, test_objects, cfg=ExperimentConfig(),
                cross_material=False, model=None):
    """Unseen-object and cross-material evaluation.

    Trains on ``train_objects`` and reports per test object the average over
    its images and the majority-vote decode.  With ``cross_material`` each
    test object gets a model trained without any object of its material.
    """
    train_objects, test_objects = set(train_objects), set(test_objects)
    if train_objects & test_objects:
        raise ValueError(f"objects {sorted(train_objects & test_objects)} are in both splits")
    train_recs = [r for r in records if r["object_id"] in train_objects]
    test_recs = [r for r in records if r["object_id"] in test_objects]
    report = ExperimentReport("crossmat" if cross_material else "holdout",
                              config={"experiment": cfg, "train_objects": sorted(train_objects),
                                      "test_objects": sorted(test_objects),
                                      "cross_material": cross_material})
    results = []
    if not cross_material:
        if model is None:
            model, _ = fit_model(train_recs, cfg, "holdout")
        report.extras["model_checksum"] = model.checksum()
        results = evaluate_records(model, test_recs, cfg.retrieval)
    else:
        models = {}
        for material in sorted({r["material"] for r in test_recs}):
            subset = [r for r in train_recs if r["material"] != material]
            if not subset:
                raise ValueError(f"no training objects left without material {material}")
            models[material], _ = fit_model(subset, cfg, f"without {material}")
            report.extras[f"train_objects_without_{material}"] = sorted(
                {r["object_id"] for r in subset})
            results += evaluate_records(models[material],
                                        [r for r in test_recs if r["material"] == material],
                                        cfg.retrieval)
    results.sort(key=lambda r: r.id)
    _holdout_rows(report, results)
    report.results = results
    return report


def run_active_learning(records, base_objects, hard_pool_objects, test_objects,
                        cfg=ExperimentConfig(), base_model=None, n_hard=3):
    """Active learning: evaluate, retrain with a hard-material pool, evaluate again.

    Rows are per test image ("pre-active" / "active").  The ``n_hard`` images
    with the lowest pre-active TPR are the designated hard images whose mean
    TPRs are reported in ``extras``.
    """
    base_objects, pool, test_objects = set(base_objects), set(hard_pool_objects), set(test_objects)
    if pool & test_objects or base_objects & test_objects:
        raise ValueError("training and test objects overlap")
    test_recs = sorted((r for r in records if r["object_id"] in test_objects),
                       key=lambda r: r["id"])
    base_recs = [r for r in records if r["object_id"] in base_objects]
    if base_model is None:
        base_model, _ = fit_model(base_recs, cfg, "pre-active")
    pre = evaluate_records(base_model, test_recs, cfg.retrieval)
    active_model, _ = fit_model(base_recs + [r for r in records if r["object_id"] in pool],
                           cfg, "active")
    post = evaluate_records(active_model, test_recs, cfg.retrieval)

    report = ExperimentReport("active", config={
        "experiment": cfg, "base_objects": sorted(base_objects),
        "hard_pool_objects": sorted(pool), "test_objects": sorted(test_objects)})
    for a, b in zip(pre, post):
        report.rows.append(ReportRow(a.id, "pre-active", 1, {n: getattr(a.counts, n) for n in RATES}))
        report.rows.append(ReportRow(b.id, "active", 1, {n: getattr(b.counts, n) for n in RATES}))
    order = sorted(range(len(pre)), key=lambda k: (pre[k].counts.tpr or 0.0, pre[k].id))
    hard = order[:n_hard]
    report.extras["hard_images"] = [pre[k].id for k in hard]
    report.extras["hard_pre_mean_tpr"] = float(np.mean([pre[k].counts.tpr or 0.0 for k in hard]))
    report.extras["hard_post_mean_tpr"] = float(np.mean([post[k].counts.tpr or 0.0 for k in hard]))
    report.extras["pre_mean_tpr"] = float(np.mean([r.counts.tpr or 0.0 for r in pre]))
    report.extras["post_mean_tpr"] = float(np.mean([r.counts.tpr or 0.0 for r in post]))
    report.extras["base_model_checksum"] = base_model.checksum()
    report.extras["active_model_checksum"] = active_model.checksum()
    report.results = {"pre": pre, "post": post}
    return report


# -- the desk-scale benchmark dataset ----------------------------------------

DEV_OBJECTS = tuple(range(1, 17))
POST_OBJECTS = (17, 18, 19, 20)
HARD_POOL_OBJECTS = (21, 22)
HARD_TEST_OBJECTS = (23,)
HARD_MATERIAL = "transparent_purple"


def benchmark_plans():
    """Objects 1-16 (15 views each), four later objects (5 views each), two
    extra hard-material objects for active learning and one hard test object."""
    from .render import default_materials

    mats = default_materials(16)
    plans = [ObjectPlan(k + 1, mats[k], 10, 5, "train") for k in range(16)]
    for obj, mat in zip(POST_OBJECTS, ("blue", "wooden", "dark_green", "skin")):
        plans.append(ObjectPlan(obj, mat, 3, 2, "test"))
    for obj in HARD_POOL_OBJECTS:
        plans.append(ObjectPlan(obj, HARD_MATERIAL, 10, 5, "train"))
    for obj in HARD_TEST_OBJECTS:
        plans.append(ObjectPlan(obj, HARD_MATERIAL, 3, 2, "test"))
    return plans


def build_benchmark(out_dir, seed=2024, m=10, **kwargs):
    return generate_objects(out_dir, benchmark_plans(), m, seed, **kwargs)
