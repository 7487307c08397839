"""Retrieval evaluation: galleries, routed queries, metrics, fusion.

Queries are routed to one branch, encoded with that branch's text
encoder, and ranked against that branch's gallery only; a misrouted
query therefore scores zero instead of falling back to the other domain.
Gallery rankings break score ties by ascending id so submissions do not
depend on storage order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import augment, model, router
from .datagen import DatasetSplit, Vocabulary, body_region_mask
from .errors import (DimensionMismatch, EmptyGallery, EmptyQuery, IncomparableRuns,
                     MissingGroundTruth, UnroutedQuery)
from .numerics import cosine_similarity_matrix
from .train import vehicle_features

TOP_K = 10


@dataclass
class GalleryIndex:
    embeddings: np.ndarray  # (N, 32), unit rows
    ids: np.ndarray         # (N,) int
    domain: str

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != self.ids.shape[0]:
            raise DimensionMismatch("embeddings and ids disagree")
        if len(set(self.ids.tolist())) != self.ids.shape[0]:
            raise ValueError("gallery ids must be unique")
        norms = np.sqrt((self.embeddings ** 2).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("gallery rows must be unit-normalized")


@dataclass
class EvalContext:
    """One branch's trained encoder plus its gallery index."""

    params: model.Params
    vocab: Vocabulary
    index: GalleryIndex


def build_gallery(features: np.ndarray, ids, params: model.Params,
                  domain: str) -> GalleryIndex:
    """Encode raw gallery features into a unit-norm index."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] == 0:
        raise EmptyGallery("no gallery images")
    emb, _ = model.encode_image_batch(params, feats)
    return GalleryIndex(embeddings=emb, ids=np.asarray(list(ids), dtype=np.int64),
                        domain=domain)


def gallery_features_for(samples, task: str, augment_flag: bool,
                         palette: augment.Palette | None) -> np.ndarray:
    if task == "pedestrian":
        return np.stack([s.image_features for s in samples])
    return vehicle_features(samples, augment_flag, palette)


def rank_gallery(query_embedding: np.ndarray, index: GalleryIndex,
                 k: int | None = None) -> list[int]:
    """Gallery ids sorted by descending cosine, ties by ascending id."""
    scores = index.embeddings @ np.asarray(query_embedding, dtype=np.float64)
    order = np.lexsort((index.ids, -scores))
    ranked = index.ids[order].tolist()
    if k is not None:
        ranked = ranked[:k]
    return ranked


def encode_query(tokens, params: model.Params) -> np.ndarray:
    emb, _ = model.encode_text_batch(params, [tokens])
    return emb[0]


def retrieve(tokens, rules: router.RuleSet,
             text_classifier: router.LogisticClassifier | None,
             ped: EvalContext, veh: EvalContext,
             k: int = TOP_K) -> tuple[router.RouteDecision, list[int]]:
    """Route a caption, encode it with the routed branch, rank that gallery."""
    if not tokens:
        raise EmptyQuery("cannot retrieve with an empty caption")
    ctx_vocab = ped.vocab  # shared vocabulary across branches
    decision = router.route_text(tokens, rules, text_classifier, ctx_vocab)
    ctx = ped if decision.domain == router.PEDESTRIAN else veh
    emb = encode_query(tokens, ctx.params)
    return decision, rank_gallery(emb, ctx.index, k=k)


def recall_at_k(rankings, ground_truth, k: int) -> float:
    """Fraction of queries with at least one ground-truth id in the top k."""
    if len(rankings) != len(ground_truth):
        raise DimensionMismatch("rankings and ground truth differ in length")
    hits = 0
    for ranked, gt in zip(rankings, ground_truth):
        gt = set(gt)
        if not gt:
            raise MissingGroundTruth("query without ground-truth ids")
        if gt & set(ranked[:k]):
            hits += 1
    return hits / len(rankings) if rankings else 0.0


def mean_ap(rankings, ground_truth, k: int = TOP_K) -> float:
    """Mean average precision truncated at k."""
    if len(rankings) != len(ground_truth):
        raise DimensionMismatch("rankings and ground truth differ in length")
    aps = []
    for ranked, gt in zip(rankings, ground_truth):
        gt = set(gt)
        if not gt:
            raise MissingGroundTruth("query without ground-truth ids")
        hits = 0
        precision_sum = 0.0
        for rank, gid in enumerate(ranked[:k], start=1):
            if gid in gt:
                hits += 1
                precision_sum += hits / rank
        denom = min(len(gt), k)
        aps.append(precision_sum / denom if denom else 0.0)
    return float(np.mean(aps)) if aps else 0.0


def mean_first_hit_rank(rankings, ground_truth, miss_rank: int) -> float:
    """Mean rank of the first relevant item; misses count as miss_rank."""
    ranks = []
    for ranked, gt in zip(rankings, ground_truth):
        gt = set(gt)
        rank = miss_rank
        for pos, gid in enumerate(ranked, start=1):
            if gid in gt:
                rank = pos
                break
        ranks.append(rank)
    return float(np.mean(ranks)) if ranks else float(miss_rank)


@dataclass
class SubmissionRow:
    query_id: str
    domain: str
    ranked_ids: list


def fuse_results(query_ids, decisions, rankings) -> list[SubmissionRow]:
    """One row per query in input order; each row stays within one domain."""
    if not (len(query_ids) == len(decisions) == len(rankings)):
        raise DimensionMismatch("queries, decisions and rankings differ in length")
    rows = []
    for qid, decision, ranked in zip(query_ids, decisions, rankings):
        if decision is None:
            raise UnroutedQuery(f"query {qid!r} has no routing decision")
        rows.append(SubmissionRow(query_id=str(qid), domain=decision.domain,
                                  ranked_ids=list(ranked[:TOP_K])))
    return rows


def submission_csv(rows) -> str:
    lines = ["query_id,domain," + ",".join(f"rank{i}" for i in range(1, TOP_K + 1))]
    for row in rows:
        ranked = [str(g) for g in row.ranked_ids[:TOP_K]]
        ranked += [""] * (TOP_K - len(ranked))
        lines.append(",".join([row.query_id, row.domain] + ranked))
    return "\n".join(lines) + "\n"


def _metric_block(rankings, gts, gallery_size: int) -> dict:
    return {
        "n_queries": len(rankings),
        "recall@1": recall_at_k(rankings, gts, 1),
        "recall@5": recall_at_k(rankings, gts, 5),
        "recall@10": recall_at_k(rankings, gts, 10),
        "map@10": mean_ap(rankings, gts, TOP_K),
        "mean_rank": mean_first_hit_rank(rankings, gts, gallery_size + 1),
    }


@dataclass
class BranchEvalInputs:
    dataset: DatasetSplit
    params: model.Params
    ckpt_meta: dict
    augment_flag: bool | None = None  # None: follow the checkpoint flag


def _config_hash(ckpt_meta: dict) -> str:
    blob = json.dumps(ckpt_meta.get("config", {}), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def evaluate_pair(ped: BranchEvalInputs, veh: BranchEvalInputs,
                  router_seed: int = 0) -> tuple[dict, list[SubmissionRow]]:
    """Evaluate both branches jointly: route every query and every gallery
    image, rank, and report overall plus per-slice metrics."""
    warnings: list[str] = []
    vocab = Vocabulary(tokens=tuple(ped.dataset.meta["vocab"]))
    if tuple(veh.dataset.meta["vocab"]) != tuple(vocab.tokens):
        raise IncomparableRuns("datasets use different vocabularies")

    palette = augment.Palette(entries=tuple(
        (e[0], e[1], tuple(e[2])) for e in veh.dataset.meta["palette"]))

    flags = {}
    for name, branch in (("ped", ped), ("veh", veh)):
        ckpt_flag = bool(branch.ckpt_meta.get("augment_colors", False))
        eval_flag = ckpt_flag if branch.augment_flag is None else branch.augment_flag
        if eval_flag != ckpt_flag:
            warnings.append(
                f"{name}: gallery augment flag {eval_flag} differs from "
                f"checkpoint flag {ckpt_flag}")
        flags[name] = eval_flag

    # route the merged gallery with an image classifier trained on train features
    ped_train_feats = np.stack([s.image_features for s in ped.dataset.train])
    veh_train_feats = vehicle_features(veh.dataset.train, flags["veh"], palette)
    img_clf = router.train_image_router(
        np.vstack([ped_train_feats, veh_train_feats]),
        np.array([0] * len(ped_train_feats) + [1] * len(veh_train_feats)),
        seed=router_seed)

    ped_raw = gallery_features_for(ped.dataset.test_gallery, "pedestrian",
                                   flags["ped"], None)
    veh_raw = gallery_features_for(veh.dataset.test_gallery, "vehicle",
                                   flags["veh"], palette)
    routed_ped_rows, routed_veh_rows = [], []  # (features, id, true_domain)
    for feats, samples, true_domain in ((ped_raw, ped.dataset.test_gallery, "pedestrian"),
                                        (veh_raw, veh.dataset.test_gallery, "vehicle")):
        for row, sample in zip(feats, samples):
            decision = router.route_image(row, img_clf)
            entry = (row, sample.id, true_domain)
            (routed_ped_rows if decision.domain == router.PEDESTRIAN
             else routed_veh_rows).append(entry)
    gallery_misroutes = sum(1 for row, sid, dom in routed_ped_rows if dom != "pedestrian")
    gallery_misroutes += sum(1 for row, sid, dom in routed_veh_rows if dom != "vehicle")

    ped_index = build_gallery(np.stack([r[0] for r in routed_ped_rows]),
                              [r[1] for r in routed_ped_rows], ped.params, "pedestrian")
    veh_index = build_gallery(np.stack([r[0] for r in routed_veh_rows]),
                              [r[1] for r in routed_veh_rows], veh.params, "vehicle")
    ped_ctx = EvalContext(params=ped.params, vocab=vocab, index=ped_index)
    veh_ctx = EvalContext(params=veh.params, vocab=vocab, index=veh_index)

    # text router: rules plus a classifier trained on the train captions
    rules = router.RuleSet()
    text_clf = router.train_router_classifier(
        [s.caption_tokens for s in ped.dataset.train] +
        [s.caption_tokens for s in veh.dataset.train],
        [0] * len(ped.dataset.train) + [1] * len(veh.dataset.train),
        vocab_size=len(vocab), seed=router_seed)

    veh_color_of = {s.id: s.tag[0] for s in veh.dataset.test_gallery}

    all_queries = list(ped.dataset.test_queries) + list(veh.dataset.test_queries)
    decisions, rankings, gts, full_rankings = [], [], [], []
    text_misroutes = 0
    for query in all_queries:
        decision = router.route_text(query.tokens, rules, text_clf, vocab)
        ctx = ped_ctx if decision.domain == router.PEDESTRIAN else veh_ctx
        emb = encode_query(query.tokens, ctx.params)
        ranked = rank_gallery(emb, ctx.index)
        decisions.append(decision)
        full_rankings.append(ranked)
        rankings.append(ranked[:TOP_K])
        gts.append(query.gt_ids)
        if decision.domain != query.domain:
            text_misroutes += 1

    rows = fuse_results([f"{q.domain[:3]}-{q.id}" for q in all_queries],
                        decisions, full_rankings)

    def slice_block(indices, gallery_size):
        if not indices:
            return None
        return _metric_block([full_rankings[i] for i in indices],
                             [gts[i] for i in indices], gallery_size)

    n_ped = len(ped.dataset.test_queries)
    ped_idx = list(range(n_ped))
    veh_idx = list(range(n_ped, len(all_queries)))
    strict_idx = [i for i in ped_idx if all_queries[i].strict_subset]
    exact_idx = [i for i in ped_idx if not all_queries[i].strict_subset]
    confus_idx = [i for i in veh_idx if all_queries[i].confusable]
    plain_idx = [i for i in veh_idx if not all_queries[i].confusable]

    def color_correct_at_1(indices):
        if not indices:
            return None
        correct = 0
        for i in indices:
            top = full_rankings[i][0] if full_rankings[i] else None
            query_color = veh_color_of.get(all_queries[i].id)
            got_color = veh_color_of.get(top)
            if got_color is not None and got_color == query_color:
                correct += 1
        return correct / len(indices)

    ped_gal = len(ped.dataset.test_gallery)
    veh_gal = len(veh.dataset.test_gallery)
    report = {
        "format": "tirlab-eval-v1",
        "dataset_hash": {"ped": ped.dataset.meta.get("dataset_hash"),
                         "veh": veh.dataset.meta.get("dataset_hash")},
        "config_hash": {"ped": _config_hash(ped.ckpt_meta),
                        "veh": _config_hash(veh.ckpt_meta)},
        "warnings": warnings,
        "router": {
            "text_misroutes": text_misroutes,
            "gallery_misroutes": gallery_misroutes,
            "n_queries": len(all_queries),
        },
        "overall": _metric_block(full_rankings, gts, max(ped_gal, veh_gal)),
        "pedestrian": {
            **_metric_block([full_rankings[i] for i in ped_idx],
                            [gts[i] for i in ped_idx], ped_gal),
            "slices": {
                "strict_subset": slice_block(strict_idx, ped_gal),
                "exact": slice_block(exact_idx, ped_gal),
            },
        },
        "vehicle": {
            **_metric_block([full_rankings[i] for i in veh_idx],
                            [gts[i] for i in veh_idx], veh_gal),
            "color_correct_recall@1": color_correct_at_1(veh_idx),
            "slices": {
                "confusable": {**(slice_block(confus_idx, veh_gal) or {}),
                               "color_correct_recall@1": color_correct_at_1(confus_idx)},
                "plain": {**(slice_block(plain_idx, veh_gal) or {}),
                          "color_correct_recall@1": color_correct_at_1(plain_idx)},
            },
        },
    }
    return report, rows


def _flatten_metrics(report: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in report.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten_metrics(value, prefix=f"{name}/"))
        elif isinstance(value, (int, float)) and not isinstance(value, bool):
            out[name] = float(value)
    return out


def ablation_report(runs) -> dict:
    """Compare labelled eval reports against the first (base) run.

    runs: sequence of (label, report) pairs from the same datasets.
    """
    if len(runs) < 2:
        raise IncomparableRuns("need at least two runs to compare")
    base_label, base_report = runs[0]
    base_hash = json.dumps(base_report.get("dataset_hash"), sort_keys=True)
    for label, rep in runs[1:]:
        if json.dumps(rep.get("dataset_hash"), sort_keys=True) != base_hash:
            raise IncomparableRuns(
                f"run {label!r} was evaluated on a different dataset")
    base_metrics = _flatten_metrics(base_report)
    table = {"base": base_label, "rows": []}
    for label, rep in runs:
        metrics = _flatten_metrics(rep)
        deltas = {k: metrics[k] - base_metrics[k]
                  for k in sorted(metrics) if k in base_metrics}
        table["rows"].append({"label": label, "metrics": metrics, "deltas": deltas})
    return table


def render_ablation_text(table: dict, keys=None) -> str:
    keys = keys or ["overall/recall@1", "overall/recall@10",
                    "pedestrian/slices/strict_subset/recall@10",
                    "vehicle/slices/confusable/color_correct_recall@1"]
    lines = [f"base: {table['base']}"]
    header = "label".ljust(24) + "".join(k.split("/")[-1].rjust(18) for k in keys)
    lines.append(header)
    for row in table["rows"]:
        cells = []
        for k in keys:
            v = row["metrics"].get(k)
            d = row["deltas"].get(k)
            cells.append(f"{v:.3f} ({d:+.3f})".rjust(18) if v is not None else "-".rjust(18))
        lines.append(row["label"].ljust(24) + "".join(cells))
    return "\n".join(lines)
