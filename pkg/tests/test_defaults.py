"""Pin the documented default hyperparameters so they cannot drift."""

from capkit import analysis, decoding, knn
from capkit.cli import build_parser
from capkit.pipeline import DEFAULT_HYPERPARAMETERS


def test_library_defaults():
    assert knn.DEFAULT_NEIGHBORS == 90
    assert knn.DEFAULT_SIMILAR_CAPTIONS == 125
    assert knn.DEFAULT_MAX_ORDER == 4
    assert decoding.DEFAULT_BEAM_SIZE == 10
    assert decoding.DEFAULT_NBEST == 500
    assert analysis.DEFAULT_TOP_K == 50
    assert analysis.DEFAULT_TAIL_FRACTION == 0.2


def test_pipeline_defaults():
    hp = DEFAULT_HYPERPARAMETERS
    assert hp["alpha"] == 0.5
    assert hp["k"] == 90
    assert hp["m"] == 125
    assert hp["beam"] == 10
    assert hp["nbest"] == 500
    assert hp["top_k"] == 50
    assert hp["tail"] == 0.2


def test_cli_defaults():
    parser = build_parser()
    knn_args = parser.parse_args(
        ["knn-caption", "--features-train", "a", "--features-test", "b",
         "--captions", "c", "--out", "d"]
    )
    assert knn_args.k == 90 and knn_args.m == 125 and knn_args.mode == "consensus"

    decode_args = parser.parse_args(["decode", "--model", "m", "--out", "o"])
    assert decode_args.beam == 10 and decode_args.nbest == 500

    mert_args = parser.parse_args(
        ["mert", "--nbest", "n", "--refs", "r", "--features", "f", "--out", "o"]
    )
    assert mert_args.restarts == 8

    me_args = parser.parse_args(["train-me", "--captions", "c", "--out", "o"])
    assert me_args.alpha == 0.5
