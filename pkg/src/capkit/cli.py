"""Command-line entry points for the caption toolkit.

Exit codes: 0 on success, 1 for violated computational invariants, 2 for
I/O or configuration problems. Failures print one machine-parsable JSON
line to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import analysis, artifacts, decoding, knn, maxent, metrics, recurrent, rerank
from .corpus import (
    build_vocabulary,
    captions_by_image,
    load_captions,
    load_detections,
    load_features,
    split_dataset,
)
from .errors import InputDataError, MalformedInput, ToolkitError
from .pipeline import STAGE_ORDER, PipelineConfig, run_pipeline


def _cmd_ingest(args) -> int:
    records = load_captions(args.captions)
    features = load_features(args.features)
    image_ids = sorted({rec.image_id for rec in records})
    missing = [i for i in image_ids if i not in features]
    if missing:
        raise MalformedInput(f"images missing feature vectors: {missing[:5]}")
    if args.detections:
        load_detections(args.detections, args.alpha)
    sizes = _parse_sizes(args.sizes)
    split = split_dataset(image_ids, sizes, args.seed)
    train = set(split.train_ids)
    vocab = build_vocabulary([r for r in records if r.image_id in train], args.min_count)
    os.makedirs(args.out_dir, exist_ok=True)
    artifacts.write_json(
        os.path.join(args.out_dir, "vocab.json"), {"tokens": vocab.word_tokens()}
    )
    artifacts.write_json(
        os.path.join(args.out_dir, "split.json"),
        {
            "train": sorted(split.train_ids),
            "val": sorted(split.val_ids),
            "testval": sorted(split.testval_ids),
        },
    )
    print(
        f"ingested {len(image_ids)} images, {len(records)} captions, "
        f"vocabulary {len(vocab.word_tokens())} words"
    )
    return 0


def _parse_sizes(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise MalformedInput("--sizes must be train,val,testval")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise MalformedInput(f"bad --sizes value {text!r}") from exc


def _cmd_knn_caption(args) -> int:
    train_features = load_features(args.features_train)
    test_features = load_features(args.features_test)
    captions = captions_by_image(load_captions(args.captions))
    index = knn.FeatureIndex.from_store(train_features)
    out: dict[int, tuple[str, ...]] = {}
    for image_id in sorted(test_features.ids()):
        query = test_features.get(image_id)
        if args.mode == "consensus":
            out[image_id] = knn.consensus_for_query(
                index, captions, query, k=args.k, m=args.m
            ).caption
        else:
            out[image_id] = knn.one_nn_caption(
                index, captions, query, rng_seed=args.seed + image_id
            )
    artifacts.write_captions_tsv(args.out, out)
    print(f"wrote {len(out)} captions to {args.out}")
    return 0


def _cmd_train_me(args) -> int:
    records = load_captions(args.captions)
    detections = load_detections(args.detections, args.alpha) if args.detections else {}
    pairs = [(rec, detections.get(rec.image_id)) for rec in records]
    lm = maxent.train_maxent(
        pairs,
        maxent.MaxEntTrainConfig(
            epochs=args.epochs,
            learning_rate=args.lr,
            l2=args.l2,
            seed=args.seed,
            min_count=args.min_count,
        ),
    )
    maxent.save_maxent(lm, args.out)
    for epoch, loss in enumerate(lm.epoch_losses, start=1):
        print(f"epoch {epoch} loss {loss:.4f}")
    print(f"train perplexity {math.exp(lm.epoch_losses[-1]):.2f}")
    print(f"wrote model to {args.out}")
    return 0


def _cmd_train_rnn(args) -> int:
    records = load_captions(args.captions)
    vocab = build_vocabulary(records, args.min_count)
    if args.mode == "mrnn":
        if not args.features:
            raise MalformedInput("--mode mrnn needs --features")
        features = load_features(args.features)
        data = [(features.get(rec.image_id), list(rec.tokens)) for rec in records]
        config = recurrent.RecurrentConfig(
            mode=recurrent.MODE_IMAGE_INITIAL,
            embed_dim=args.embed,
            hidden_dim=args.hidden,
            feature_dim=features.dim,
            seed=args.seed,
        )
    else:
        if not args.detections:
            raise MalformedInput("--mode dgrnn needs --detections")
        detections = load_detections(args.detections, args.alpha)
        data = [
            (detections.get(rec.image_id, frozenset()), list(rec.tokens))
            for rec in records
        ]
        config = recurrent.RecurrentConfig(
            mode=recurrent.MODE_COVERAGE_AUX,
            embed_dim=args.embed,
            hidden_dim=args.hidden,
            seed=args.seed,
        )
    lm = recurrent.RecurrentLM(vocab, config)
    recurrent.train(
        lm,
        data,
        recurrent.RnnTrainConfig(
            epochs=args.epochs, learning_rate=args.lr, clip=args.clip, seed=args.seed
        ),
    )
    recurrent.save_recurrent(lm, args.out)
    for epoch, loss in enumerate(lm.epoch_losses, start=1):
        print(f"epoch {epoch} loss {loss:.4f}")
    print(f"train perplexity {math.exp(lm.epoch_losses[-1]):.2f}")
    print(f"wrote model to {args.out}")
    return 0


def _load_any_model(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise MalformedInput(f"cannot read model file {path}: {exc}") from exc
    if magic == b"MELM":
        return maxent.load_maxent(path)
    if magic == b"GRLM":
        return recurrent.load_recurrent(path)
    raise MalformedInput(f"{path}: unknown model magic {magic!r}")


def _scorer_for(model):
    if isinstance(model, maxent.MaxEntLM):
        return decoding.MaxEntScorer(model)
    return decoding.RecurrentScorer(model)


def _cmd_decode(args) -> int:
    model = _load_any_model(args.model)
    scorer = _scorer_for(model)
    if args.rescore:
        nbests = artifacts.read_nbest_tsv(args.rescore)
        features = load_features(args.features) if args.features else None
        rescored = []
        for nb in nbests:
            if isinstance(model, recurrent.RecurrentLM) and model.mode == recurrent.MODE_IMAGE_INITIAL:
                if features is None:
                    raise MalformedInput("rescoring with an image-conditioned model needs --features")
                conditioning = features.get(nb.image_id)
            else:
                conditioning = frozenset()
            rescored.append(
                decoding.rescore_logprob(nb, scorer, conditioning, args.feature_name)
            )
        artifacts.write_nbest_tsv(args.out, rescored)
        print(f"rescored {len(rescored)} n-best lists into {args.out}")
        return 0
    nbests = []
    incomplete = 0
    if args.mode == "coverage":
        if not args.detections:
            raise MalformedInput("--mode coverage needs --detections")
        if isinstance(model, recurrent.RecurrentLM) and model.mode == recurrent.MODE_IMAGE_INITIAL:
            raise MalformedInput("coverage decoding needs a MELM or a dgrnn GRLM model")
        detections = load_detections(args.detections, args.alpha)
        for image_id in sorted(detections):
            nbest = decoding.coverage_beam_search(
                scorer,
                detections[image_id],
                beam_size=args.beam,
                max_len=args.max_len,
                n_best=args.nbest,
                min_coverage=args.min_coverage,
            )
            incomplete += 0 if nbest.complete else 1
            nbests.append(nbest)
    else:
        if not (isinstance(model, recurrent.RecurrentLM)
                and model.mode == recurrent.MODE_IMAGE_INITIAL):
            raise MalformedInput("plain decoding needs an image-conditioned GRLM model")
        if not args.features:
            raise MalformedInput("--mode plain needs --features")
        features = load_features(args.features)
        for image_id in sorted(features.ids()):
            nbest = decoding.beam_search(
                scorer,
                features.get(image_id),
                beam_size=args.beam,
                max_len=args.max_len,
                n_best=args.nbest,
                image_id=image_id,
            )
            incomplete += 0 if nbest.complete else 1
            nbests.append(nbest)
    artifacts.write_nbest_tsv(args.out, nbests)
    print(f"decoded {len(nbests)} images into {args.out}")
    if incomplete:
        print(f"warning: {incomplete} images returned incomplete hypotheses")
    return 0


def _cmd_mert(args) -> int:
    nbests = artifacts.read_nbest_tsv(args.nbest)
    refs = captions_by_image(load_captions(args.refs))
    feature_names = [f for f in args.features.split(",") if f]
    if not feature_names:
        raise MalformedInput("--features must name at least one feature column")
    init = {name: (1.0 if i == 0 else 0.0) for i, name in enumerate(feature_names)}
    log: list = []
    weights = rerank.mert_optimize(
        nbests,
        refs,
        init,
        rerank.MertConfig(restarts=args.restarts, max_iters=args.iters, seed=args.seed),
        iteration_log=log,
    )
    artifacts.write_json(args.out, weights)
    if log:
        print(f"final corpus BLEU {log[-1][2]:.2f} after {len(log)} iterations")
    print(f"wrote weights to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    generated = artifacts.read_captions_tsv(args.hyp)
    refs = captions_by_image(load_captions(args.refs))
    pairs = []
    for image_id, tokens in sorted(generated.items()):
        if image_id not in refs:
            raise MalformedInput(f"no reference captions for image {image_id}")
        pairs.append((tokens, refs[image_id]))
    if args.metric in ("bleu", "all"):
        print(f"BLEU {metrics.corpus_bleu(pairs):.2f}")
    if args.metric in ("meteor", "all"):
        mean = sum(metrics.meteor(hyp, ref) for hyp, ref in pairs) / len(pairs)
        print(f"METEOR {mean:.2f}")
    return 0


def _cmd_analyze(args) -> int:
    generated = artifacts.read_captions_tsv(args.generated)
    captions = captions_by_image(load_captions(args.captions))
    train_features = load_features(args.features_train)
    test_features = load_features(args.features_test)
    train_pool = [
        cap for image_id in train_features.ids() for cap in captions.get(image_id, ())
    ]
    rep = analysis.repetition_stats(generated, train_pool)
    bins = analysis.overlap_bins(
        test_features, train_features, top_k=args.top_k, tail_fraction=args.tail
    )
    refs = {}
    for image_id in generated:
        if image_id not in captions:
            raise MalformedInput(f"no reference captions for image {image_id}")
        refs[image_id] = captions[image_id]
    per_bin = analysis.binned_bleu(generated, refs, bins)
    report = {
        "repetition": {
            "total": rep.total,
            "unique": rep.unique,
            "seen_in_training": rep.seen_in_training,
            "unique_fraction": round(rep.unique_fraction, 6),
            "seen_in_training_fraction": round(rep.seen_in_training_fraction, 6),
        },
        "binned_bleu": {name: round(score, 6) for name, score in per_bin.items()},
    }
    if args.report == "json":
        print(json.dumps(report, sort_keys=True, indent=2))
    else:
        print(
            f"unique captions: {rep.unique}/{rep.total} "
            f"({100 * rep.unique_fraction:.1f}%)"
        )
        print(
            f"seen in training: {rep.seen_in_training}/{rep.total} "
            f"({100 * rep.seen_in_training_fraction:.1f}%)"
        )
        for name, score in report["binned_bleu"].items():
            print(f"BLEU [{name}] {score:.2f}")
    return 0


def _cmd_pipeline(args) -> int:
    doc = artifacts.read_json(args.config)
    if not isinstance(doc, dict):
        raise MalformedInput(f"{args.config}: config must be a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    for override in args.set or []:
        key, sep, value = override.partition("=")
        if not sep:
            raise MalformedInput(f"--set needs key=value, got {override!r}")
        hyperparameters = doc.setdefault("hyperparameters", {})
        try:
            hyperparameters[key] = json.loads(value)
        except json.JSONDecodeError:
            hyperparameters[key] = value
    base = os.path.dirname(os.path.abspath(args.config))
    config = PipelineConfig.from_doc(doc, base_dir=base)
    stages = args.stages.split(",") if args.stages else None
    run_pipeline(config, stages, args.out_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capkit",
        description="caption retrieval, generation, reranking, and evaluation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate inputs, build vocabulary and split")
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--detections")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--sizes", required=True, help="train,val,testval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("knn-caption", help="retrieval captions (consensus or 1-NN)")
    p.add_argument("--features-train", required=True)
    p.add_argument("--features-test", required=True)
    p.add_argument("--captions", required=True, help="training captions JSON")
    p.add_argument("--k", type=int, default=knn.DEFAULT_NEIGHBORS)
    p.add_argument("--m", type=int, default=knn.DEFAULT_SIMILAR_CAPTIONS)
    p.add_argument("--mode", choices=("consensus", "onenn"), default="consensus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_knn_caption)

    p = sub.add_parser("train-me", help="train the detection-conditioned log-linear LM")
    p.add_argument("--captions", required=True)
    p.add_argument("--detections")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_me)

    p = sub.add_parser("train-rnn", help="train a gated recurrent LM")
    p.add_argument("--mode", choices=("mrnn", "dgrnn"), required=True)
    p.add_argument("--features")
    p.add_argument("--detections")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--captions", required=True)
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_rnn)

    p = sub.add_parser("decode", help="beam-search decode or rescore an n-best file")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("plain", "coverage"), default="plain")
    p.add_argument("--features")
    p.add_argument("--detections")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beam", type=int, default=decoding.DEFAULT_BEAM_SIZE)
    p.add_argument("--nbest", type=int, default=decoding.DEFAULT_NBEST)
    p.add_argument("--max-len", type=int, default=decoding.DEFAULT_MAX_LEN)
    p.add_argument("--min-coverage", type=int, default=None)
    p.add_argument("--rescore", help="existing n-best TSV to add a feature column to")
    p.add_argument("--feature-name", default="rescore")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("mert", help="optimize reranking weights to maximize BLEU")
    p.add_argument("--nbest", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--features", required=True, help="comma-separated feature columns")
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mert)

    p = sub.add_parser("eval", help="score generated captions against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--metric", choices=("bleu", "meteor", "all"), default="all")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze", help="repetition and train/test-overlap reports")
    p.add_argument("--generated", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--features-train", required=True)
    p.add_argument("--features-test", required=True)
    p.add_argument("--top-k", type=int, default=analysis.DEFAULT_TOP_K)
    p.add_argument("--tail", type=float, default=analysis.DEFAULT_TAIL_FRACTION)
    p.add_argument("--report", choices=("json", "text"), default="text")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("pipeline", help="run pipeline stages from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGE_ORDER)}")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a hyperparameter")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputDataError, OSError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2
    except ToolkitError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
