"""End-to-end pipeline: ingest -> retrieve -> train -> decode -> rerank -> report.

Stages communicate only through files inside the output directory, write
atomically, and a manifest records the configuration hash plus a checksum
of every artifact, so identical (config, seed) runs are byte-comparable.
Stages run sequentially; parallelism, where any, lives inside the owning
modules.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from . import analysis, artifacts, decoding, knn, maxent, metrics, recurrent, rerank
from .corpus import (
    Vocabulary,
    build_vocabulary,
    captions_by_image,
    load_captions,
    load_detections,
    load_features,
    split_dataset,
)
from .errors import MalformedInput

STAGE_ORDER = (
    "ingest", "knn", "train_me", "train_rnn", "decode", "rerank", "eval", "analyze",
)

DEFAULT_HYPERPARAMETERS: dict = {
    "alpha": 0.5,
    "k": 90,
    "m": 125,
    "beam": 10,
    "nbest": 500,
    "top_k": 50,
    "tail": 0.2,
    "min_count": 1,
    "max_len": 16,
    "min_coverage": None,
    "me_epochs": 8,
    "me_lr": 0.2,
    "me_l2": 1e-6,
    "rnn_epochs": 8,
    "rnn_lr": 0.15,
    "rnn_clip": 5.0,
    "rnn_embed": 32,
    "rnn_hidden": 64,
    "mert_restarts": 8,
    "mert_iters": 30,
    "mert_features": ["logprob", "mrnn", "length", "covered"],
}


def _check_ranges(hp: dict) -> None:
    checks = [
        (0.0 <= hp["alpha"] <= 1.0, "alpha must be in [0, 1]"),
        (hp["k"] >= 1, "k must be >= 1"),
        (hp["m"] >= 1, "m must be >= 1"),
        (hp["beam"] >= 1, "beam must be >= 1"),
        (hp["nbest"] >= 1, "nbest must be >= 1"),
        (hp["top_k"] >= 1, "top_k must be >= 1"),
        (0.0 < hp["tail"] <= 0.5, "tail must be in (0, 0.5]"),
        (hp["min_count"] >= 1, "min_count must be >= 1"),
        (hp["max_len"] >= 2, "max_len must be >= 2"),
        (hp["min_coverage"] is None or hp["min_coverage"] >= 0,
         "min_coverage must be null or >= 0"),
        (hp["me_epochs"] >= 1 and hp["rnn_epochs"] >= 1, "epochs must be >= 1"),
        (hp["me_lr"] > 0 and hp["rnn_lr"] > 0, "learning rates must be positive"),
        (hp["mert_restarts"] >= 0, "mert_restarts must be >= 0"),
        (hp["mert_iters"] >= 1, "mert_iters must be >= 1"),
        (isinstance(hp["mert_features"], (list, tuple)) and len(hp["mert_features"]) >= 1,
         "mert_features must name at least one feature"),
    ]
    for ok, message in checks:
        if not ok:
            raise MalformedInput(f"hyperparameter out of range: {message}")


@dataclass
class PipelineConfig:
    """Validated pipeline configuration; see README for the JSON schema."""

    captions_path: str
    features_path: str
    detections_path: str | None
    split_sizes: tuple[int, int, int]
    seed: int
    hyperparameters: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(DEFAULT_HYPERPARAMETERS)
        unknown = set(self.hyperparameters) - set(merged)
        if unknown:
            raise MalformedInput(f"unknown hyperparameters: {sorted(unknown)}")
        merged.update(self.hyperparameters)
        _check_ranges(merged)
        self.hyperparameters = merged

    @classmethod
    def from_doc(cls, doc: dict, base_dir: str = ".") -> "PipelineConfig":
        try:
            paths = doc["paths"]
            captions = paths["captions"]
            features = paths["features"]
            detections = paths.get("detections")
            split = doc["split"]
            seed = int(doc.get("seed", 0))
        except (KeyError, TypeError) as exc:
            raise MalformedInput(f"config missing required key: {exc}") from exc
        if not isinstance(split, (list, tuple)) or len(split) != 3:
            raise MalformedInput("config split must be [train, val, testval] sizes")

        def resolve(p):
            return p if p is None or os.path.isabs(p) else os.path.join(base_dir, p)

        return cls(
            captions_path=resolve(captions),
            features_path=resolve(features),
            detections_path=resolve(detections),
            split_sizes=tuple(int(s) for s in split),
            seed=seed,
            hyperparameters=dict(doc.get("hyperparameters", {})),
        )

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        doc = artifacts.read_json(path)
        if not isinstance(doc, dict):
            raise MalformedInput(f"{path}: config must be a JSON object")
        return cls.from_doc(doc, base_dir=os.path.dirname(os.path.abspath(path)))

    def canonical_doc(self) -> dict:
        return {
            "paths": {
                "captions": os.path.basename(self.captions_path),
                "features": os.path.basename(self.features_path),
                "detections": (
                    os.path.basename(self.detections_path)
                    if self.detections_path else None
                ),
            },
            "split": list(self.split_sizes),
            "seed": self.seed,
            "hyperparameters": self.hyperparameters,
        }

    def config_hash(self) -> str:
        canon = json.dumps(self.canonical_doc(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class PipelineContext:
    """Lazy, cached access to inputs and prior-stage artifacts."""

    def __init__(self, config: PipelineConfig, out_dir: str):
        self.config = config
        self.hp = config.hyperparameters
        self.out_dir = out_dir
        self._cache: dict = {}

    def artifact(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def require_artifact(self, name: str, producer: str) -> str:
        path = self.artifact(name)
        if not os.path.exists(path):
            raise MalformedInput(
                f"missing artifact {path}; run the '{producer}' stage first"
            )
        return path

    def _cached(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    def records(self):
        return self._cached("records", lambda: load_captions(self.config.captions_path))

    def captions(self):
        return self._cached("captions", lambda: captions_by_image(self.records()))

    def features(self):
        return self._cached("features", lambda: load_features(self.config.features_path))

    def detections(self):
        if self.config.detections_path is None:
            raise MalformedInput("this stage needs a detections path in the config")
        return self._cached(
            "detections",
            lambda: load_detections(self.config.detections_path, self.hp["alpha"]),
        )

    def split(self):
        def build():
            doc = artifacts.read_json(self.require_artifact("split.json", "ingest"))
            return {k: sorted(int(i) for i in doc[k]) for k in ("train", "val", "testval")}

        return self._cached("split", build)

    def vocabulary(self):
        def build():
            doc = artifacts.read_json(self.require_artifact("vocab.json", "ingest"))
            return Vocabulary(doc["tokens"])

        return self._cached("vocabulary", build)

    def train_index(self):
        return self._cached(
            "train_index",
            lambda: knn.FeatureIndex.from_store(self.features(), self.split()["train"]),
        )

    def train_captions(self):
        train = set(self.split()["train"])
        return {i: caps for i, caps in self.captions().items() if i in train}

    def refs_for(self, image_ids):
        captions = self.captions()
        refs = {}
        for image_id in image_ids:
            if image_id not in captions:
                raise MalformedInput(f"no reference captions for image {image_id}")
            refs[image_id] = captions[image_id]
        return refs


def _stage_ingest(ctx: PipelineContext) -> list[str]:
    records = ctx.records()
    features = ctx.features()
    image_ids = sorted({rec.image_id for rec in records})
    missing = [i for i in image_ids if i not in features]
    if missing:
        raise MalformedInput(f"images missing feature vectors: {missing[:5]}")
    if ctx.config.detections_path is not None:
        ctx.detections()
    split = split_dataset(image_ids, ctx.config.split_sizes, ctx.config.seed)
    train = set(split.train_ids)
    vocab = build_vocabulary(
        [rec for rec in records if rec.image_id in train], ctx.hp["min_count"]
    )
    artifacts.write_json(ctx.artifact("vocab.json"), {"tokens": vocab.word_tokens()})
    artifacts.write_json(
        ctx.artifact("split.json"),
        {
            "train": sorted(split.train_ids),
            "val": sorted(split.val_ids),
            "testval": sorted(split.testval_ids),
        },
    )
    return ["vocab.json", "split.json"]


def _stage_knn(ctx: PipelineContext) -> list[str]:
    index = ctx.train_index()
    captions = ctx.train_captions()
    features = ctx.features()
    consensus: dict[int, tuple[str, ...]] = {}
    onenn: dict[int, tuple[str, ...]] = {}
    for image_id in ctx.split()["testval"]:
        query = features.get(image_id)
        consensus[image_id] = knn.consensus_for_query(
            index, captions, query, k=ctx.hp["k"], m=ctx.hp["m"]
        ).caption
        onenn[image_id] = knn.one_nn_caption(
            index, captions, query, rng_seed=ctx.config.seed + image_id
        )
    artifacts.write_captions_tsv(ctx.artifact("knn_consensus.tsv"), consensus)
    artifacts.write_captions_tsv(ctx.artifact("knn_onenn.tsv"), onenn)
    return ["knn_consensus.tsv", "knn_onenn.tsv"]


def _stage_train_me(ctx: PipelineContext) -> list[str]:
    detections = ctx.detections()
    train = set(ctx.split()["train"])
    pairs = [
        (rec, detections.get(rec.image_id))
        for rec in ctx.records()
        if rec.image_id in train
    ]
    config = maxent.MaxEntTrainConfig(
        epochs=ctx.hp["me_epochs"],
        learning_rate=ctx.hp["me_lr"],
        l2=ctx.hp["me_l2"],
        seed=ctx.config.seed,
        min_count=ctx.hp["min_count"],
    )
    lm = maxent.train_maxent(pairs, config, vocabulary=ctx.vocabulary())
    maxent.save_maxent(lm, ctx.artifact("me.model"))
    return ["me.model"]


def _stage_train_rnn(ctx: PipelineContext) -> list[str]:
    features = ctx.features()
    train = set(ctx.split()["train"])
    data = [
        (features.get(rec.image_id), list(rec.tokens))
        for rec in ctx.records()
        if rec.image_id in train
    ]
    lm = recurrent.RecurrentLM(
        ctx.vocabulary(),
        recurrent.RecurrentConfig(
            mode=recurrent.MODE_IMAGE_INITIAL,
            embed_dim=ctx.hp["rnn_embed"],
            hidden_dim=ctx.hp["rnn_hidden"],
            feature_dim=features.dim,
            seed=ctx.config.seed,
        ),
    )
    recurrent.train(
        lm,
        data,
        recurrent.RnnTrainConfig(
            epochs=ctx.hp["rnn_epochs"],
            learning_rate=ctx.hp["rnn_lr"],
            clip=ctx.hp["rnn_clip"],
            seed=ctx.config.seed,
        ),
    )
    recurrent.save_recurrent(lm, ctx.artifact("rnn.model"))
    return ["rnn.model"]


def _stage_decode(ctx: PipelineContext) -> list[str]:
    me_lm = maxent.load_maxent(ctx.require_artifact("me.model", "train_me"))
    rnn_lm = recurrent.load_recurrent(ctx.require_artifact("rnn.model", "train_rnn"))
    me_scorer = decoding.MaxEntScorer(me_lm)
    rnn_scorer = decoding.RecurrentScorer(rnn_lm)
    detections = ctx.detections()
    features = ctx.features()
    outputs = []
    for split_name in ("val", "testval"):
        nbests = []
        for image_id in ctx.split()[split_name]:
            if image_id not in detections:
                raise MalformedInput(f"no detections for image {image_id}")
            nbest = decoding.coverage_beam_search(
                me_scorer,
                detections[image_id],
                beam_size=ctx.hp["beam"],
                max_len=ctx.hp["max_len"],
                n_best=ctx.hp["nbest"],
                min_coverage=ctx.hp["min_coverage"],
            )
            nbest = decoding.rescore_logprob(
                nbest, rnn_scorer, features.get(image_id), "mrnn"
            )
            nbests.append(nbest)
        incomplete = sum(1 for nb in nbests if not nb.complete)
        if incomplete:
            print(f"[decode] warning: {incomplete} {split_name} images incomplete")
        name = f"me_nbest_{split_name}.tsv"
        artifacts.write_nbest_tsv(ctx.artifact(name), nbests)
        outputs.append(name)
    mrnn_captions = {}
    for image_id in ctx.split()["testval"]:
        result = decoding.beam_search(
            rnn_scorer,
            features.get(image_id),
            beam_size=ctx.hp["beam"],
            max_len=ctx.hp["max_len"],
            n_best=1,
            image_id=image_id,
        )
        mrnn_captions[image_id] = result.hypotheses[0].tokens if result.hypotheses else ()
    artifacts.write_captions_tsv(ctx.artifact("mrnn_testval.tsv"), mrnn_captions)
    outputs.append("mrnn_testval.tsv")
    return outputs


def _stage_rerank(ctx: PipelineContext) -> list[str]:
    val_nbests = artifacts.read_nbest_tsv(
        ctx.require_artifact("me_nbest_val.tsv", "decode")
    )
    refs = ctx.refs_for([nb.image_id for nb in val_nbests])
    feature_names = list(ctx.hp["mert_features"])
    init = {name: (1.0 if name == "logprob" else 0.0) for name in feature_names}
    weights = rerank.mert_optimize(
        val_nbests,
        refs,
        init,
        rerank.MertConfig(
            restarts=ctx.hp["mert_restarts"],
            max_iters=ctx.hp["mert_iters"],
            seed=ctx.config.seed,
        ),
    )
    artifacts.write_json(ctx.artifact("weights.json"), weights)
    test_nbests = artifacts.read_nbest_tsv(
        ctx.require_artifact("me_nbest_testval.tsv", "decode")
    )
    reranked = {
        nb.image_id: rerank.apply_weights(nb, weights).tokens for nb in test_nbests
    }
    artifacts.write_captions_tsv(ctx.artifact("reranked_testval.tsv"), reranked)
    return ["weights.json", "reranked_testval.tsv"]


_EVAL_SYSTEMS = (
    ("knn_consensus", "knn_consensus.tsv", "knn"),
    ("knn_onenn", "knn_onenn.tsv", "knn"),
    ("mrnn", "mrnn_testval.tsv", "decode"),
    ("me_reranked", "reranked_testval.tsv", "rerank"),
)


def _stage_eval(ctx: PipelineContext) -> list[str]:
    scores = {}
    for system, filename, producer in _EVAL_SYSTEMS:
        path = ctx.artifact(filename)
        if not os.path.exists(path):
            continue
        generated = artifacts.read_captions_tsv(path)
        refs = ctx.refs_for(generated)
        bleu = metrics.corpus_bleu(
            (tokens, refs[image_id]) for image_id, tokens in sorted(generated.items())
        )
        meteor_mean = sum(
            metrics.meteor(tokens, refs[image_id])
            for image_id, tokens in sorted(generated.items())
        ) / len(generated)
        scores[system] = {"bleu": round(bleu, 6), "meteor": round(meteor_mean, 6)}
    if not scores:
        raise MalformedInput("eval stage found no generated caption files; run knn/decode")
    for system, row in scores.items():
        print(f"[eval] {system}: BLEU {row['bleu']:.2f} METEOR {row['meteor']:.2f}")
    artifacts.write_json(ctx.artifact("scores.json"), scores)
    return ["scores.json"]


def _stage_analyze(ctx: PipelineContext) -> list[str]:
    split = ctx.split()
    features = ctx.features()
    train_store = features.subset(split["train"])
    test_store = features.subset(split["testval"])
    bins = analysis.overlap_bins(
        test_store, train_store, top_k=ctx.hp["top_k"], tail_fraction=ctx.hp["tail"]
    )
    train_caption_pool = [
        cap for caps in ctx.train_captions().values() for cap in caps
    ]
    report: dict = {
        "bins": {
            name: bins.images_in(name)
            for name in (analysis.BIN_LEAST, analysis.BIN_MIDDLE, analysis.BIN_MOST)
        },
        "systems": {},
    }
    for system, filename, _ in _EVAL_SYSTEMS:
        path = ctx.artifact(filename)
        if not os.path.exists(path):
            continue
        generated = artifacts.read_captions_tsv(path)
        refs = ctx.refs_for(generated)
        rep = analysis.repetition_stats(generated, train_caption_pool)
        report["systems"][system] = {
            "repetition": {
                "total": rep.total,
                "unique": rep.unique,
                "seen_in_training": rep.seen_in_training,
                "unique_fraction": round(rep.unique_fraction, 6),
                "seen_in_training_fraction": round(rep.seen_in_training_fraction, 6),
            },
            "binned_bleu": {
                name: round(score, 6)
                for name, score in analysis.binned_bleu(generated, refs, bins).items()
            },
        }
    if not report["systems"]:
        raise MalformedInput("analyze stage found no generated caption files")
    artifacts.write_json(ctx.artifact("analysis.json"), report)
    return ["analysis.json"]


_STAGE_FNS = {
    "ingest": _stage_ingest,
    "knn": _stage_knn,
    "train_me": _stage_train_me,
    "train_rnn": _stage_train_rnn,
    "decode": _stage_decode,
    "rerank": _stage_rerank,
    "eval": _stage_eval,
    "analyze": _stage_analyze,
}


def run_pipeline(config: PipelineConfig, stages=None, out_dir: str = ".") -> dict:
    """Run the requested stages in canonical order; returns the manifest."""
    if stages is None:
        stages = list(STAGE_ORDER)
    unknown = [s for s in stages if s not in _STAGE_FNS]
    if unknown:
        raise MalformedInput(f"unknown stages: {unknown}; valid: {list(STAGE_ORDER)}")
    os.makedirs(out_dir, exist_ok=True)
    ctx = PipelineContext(config, out_dir)
    manifest: dict = {
        "config_sha256": config.config_hash(),
        "seed": config.seed,
        "stages": {},
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path):
        previous = artifacts.read_json(manifest_path)
        if previous.get("config_sha256") == manifest["config_sha256"]:
            manifest["stages"] = previous.get("stages", {})
    for stage in STAGE_ORDER:
        if stage not in stages:
            continue
        outputs = _STAGE_FNS[stage](ctx)
        manifest["stages"][stage] = {
            name: artifacts.sha256_file(os.path.join(out_dir, name)) for name in outputs
        }
        print(f"[{stage}] wrote {' '.join(outputs)}")
    artifacts.write_json(manifest_path, manifest)
    return manifest
