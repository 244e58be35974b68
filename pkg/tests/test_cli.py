import json

import pytest

from capkit.artifacts import read_captions_tsv, read_json, read_nbest_tsv
from capkit.cli import main
from capkit.corpus import FeatureStore, save_features
from capkit.fixture import generate_fixture

@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("fixture")
    generate_fixture(path, n_images=40, seed=3)
    return path


def run_cli(*args):
    return main([str(a) for a in args])


class TestIngest:
    def test_writes_vocab_and_split(self, fixture_dir, tmp_path, capsys):
        code = run_cli(
            "ingest",
            "--captions", fixture_dir / "captions.json",
            "--features", fixture_dir / "features.fvec",
            "--detections", fixture_dir / "detections.jsonl",
            "--sizes", "30,5,5",
            "--seed", "7",
            "--out-dir", tmp_path,
        )
        assert code == 0
        vocab = read_json(tmp_path / "vocab.json")
        split = read_json(tmp_path / "split.json")
        assert len(vocab["tokens"]) > 5
        assert len(split["train"]) == 30
        assert "ingested" in capsys.readouterr().out

    def test_missing_features_file_exits_2(self, fixture_dir, tmp_path, capsys):
        code = run_cli(
            "ingest",
            "--captions", fixture_dir / "captions.json",
            "--features", tmp_path / "nope.fvec",
            "--sizes", "30,5,5",
            "--out-dir", tmp_path,
        )
        assert code == 2
        err = capsys.readouterr().err.strip()
        doc = json.loads(err)
        assert "nope.fvec" in doc["message"]


class TestKnnCaption:
    def test_consensus_and_onenn(self, fixture_dir, tmp_path):
        test_store_path = tmp_path / "test.fvec"
        # reuse a couple of fixture vectors as queries
        from capkit.corpus import load_features

        full = load_features(fixture_dir / "features.fvec")
        sub = FeatureStore(full.dim)
        for image_id in list(full.ids())[:4]:
            sub.add(image_id + 10000, full.get(image_id))
        save_features(sub, test_store_path)
        for mode in ("consensus", "onenn"):
            out = tmp_path / f"{mode}.tsv"
            code = run_cli(
                "knn-caption",
                "--features-train", fixture_dir / "features.fvec",
                "--features-test", test_store_path,
                "--captions", fixture_dir / "captions.json",
                "--k", "10", "--m", "20", "--mode", mode,
                "--seed", "1", "--out", out,
            )
            assert code == 0
            captions = read_captions_tsv(out)
            assert len(captions) == 4
            assert all(captions.values())


class TestTrainAndDecode:
    def test_me_train_decode_rescore_mert_eval(self, fixture_dir, tmp_path, capsys):
        me_model = tmp_path / "me.model"
        code = run_cli(
            "train-me",
            "--captions", fixture_dir / "captions.json",
            "--detections", fixture_dir / "detections.jsonl",
            "--alpha", "0.5", "--epochs", "3", "--lr", "0.3",
            "--out", me_model,
        )
        assert code == 0
        assert me_model.exists()

        nbest = tmp_path / "nbest.tsv"
        code = run_cli(
            "decode",
            "--model", me_model,
            "--mode", "coverage",
            "--detections", fixture_dir / "detections.jsonl",
            "--beam", "5", "--nbest", "8", "--max-len", "10",
            "--out", nbest,
        )
        assert code == 0
        lists = read_nbest_tsv(nbest)
        assert len(lists) == 40
        assert all(set(h.features) == {"logprob", "length", "covered"}
                   for nb in lists for h in nb.hypotheses)

        rnn_model = tmp_path / "rnn.model"
        code = run_cli(
            "train-rnn",
            "--mode", "mrnn",
            "--captions", fixture_dir / "captions.json",
            "--features", fixture_dir / "features.fvec",
            "--embed", "8", "--hidden", "12", "--epochs", "2", "--lr", "0.2",
            "--out", rnn_model,
        )
        assert code == 0

        rescored = tmp_path / "nbest_rescored.tsv"
        code = run_cli(
            "decode",
            "--model", rnn_model,
            "--rescore", nbest,
            "--features", fixture_dir / "features.fvec",
            "--feature-name", "mrnn",
            "--out", rescored,
        )
        assert code == 0
        lists = read_nbest_tsv(rescored)
        assert all("mrnn" in h.features for nb in lists for h in nb.hypotheses)

        weights_path = tmp_path / "weights.json"
        code = run_cli(
            "mert",
            "--nbest", rescored,
            "--refs", fixture_dir / "captions.json",
            "--features", "logprob,mrnn,length",
            "--restarts", "2", "--iters", "5", "--seed", "0",
            "--out", weights_path,
        )
        assert code == 0
        weights = read_json(weights_path)
        assert set(weights) == {"logprob", "mrnn", "length"}

        # plain decode with the image-conditioned model
        plain = tmp_path / "plain.tsv"
        code = run_cli(
            "decode",
            "--model", rnn_model,
            "--mode", "plain",
            "--features", fixture_dir / "features.fvec",
            "--beam", "4", "--nbest", "1", "--max-len", "10",
            "--out", plain,
        )
        assert code == 0

        # eval against references
        hyp_tsv = tmp_path / "hyp.tsv"
        lists = read_nbest_tsv(nbest)
        from capkit.artifacts import write_captions_tsv

        write_captions_tsv(hyp_tsv, {nb.image_id: nb.hypotheses[0].tokens for nb in lists})
        capsys.readouterr()
        code = run_cli(
            "eval", "--hyp", hyp_tsv, "--refs", fixture_dir / "captions.json",
            "--metric", "all",
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "BLEU" in out and "METEOR" in out

    def test_dgrnn_training(self, fixture_dir, tmp_path):
        model = tmp_path / "dgrnn.model"
        code = run_cli(
            "train-rnn",
            "--mode", "dgrnn",
            "--captions", fixture_dir / "captions.json",
            "--detections", fixture_dir / "detections.jsonl",
            "--embed", "8", "--hidden", "10", "--epochs", "1",
            "--out", model,
        )
        assert code == 0
        nbest = tmp_path / "dgrnn_nbest.tsv"
        code = run_cli(
            "decode",
            "--model", model,
            "--mode", "coverage",
            "--detections", fixture_dir / "detections.jsonl",
            "--beam", "4", "--nbest", "4", "--max-len", "10",
            "--out", nbest,
        )
        assert code == 0
        assert read_nbest_tsv(nbest)


class TestAnalyzeCli:
    def test_text_and_json_reports(self, fixture_dir, tmp_path, capsys):
        from capkit.artifacts import write_captions_tsv
        from capkit.corpus import load_captions, load_features, captions_by_image

        full = load_features(fixture_dir / "features.fvec")
        ids = sorted(full.ids())
        train_ids, test_ids = ids[:30], ids[30:]
        train_path = tmp_path / "train.fvec"
        test_path = tmp_path / "test.fvec"
        save_features(full.subset(train_ids), train_path)
        save_features(full.subset(test_ids), test_path)
        captions = captions_by_image(load_captions(fixture_dir / "captions.json"))
        generated = tmp_path / "gen.tsv"
        write_captions_tsv(generated, {i: captions[i][0] for i in test_ids})
        for report in ("text", "json"):
            capsys.readouterr()
            code = run_cli(
                "analyze",
                "--generated", generated,
                "--captions", fixture_dir / "captions.json",
                "--features-train", train_path,
                "--features-test", test_path,
                "--top-k", "5", "--tail", "0.2",
                "--report", report,
            )
            assert code == 0
            out = capsys.readouterr().out
            if report == "json":
                doc = json.loads(out)
                assert set(doc) == {"repetition", "binned_bleu"}
            else:
                assert "unique captions" in out


class TestPipelineCli:
    def test_eval_only_stage_with_prebuilt_artifacts(self, fixture_dir, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({
            "seed": 3,
            "paths": {
                "captions": str(fixture_dir / "captions.json"),
                "features": str(fixture_dir / "features.fvec"),
                "detections": str(fixture_dir / "detections.jsonl"),
            },
            "split": [30, 5, 5],
            "hyperparameters": {"k": 5, "m": 10},
        }))
        out_dir = tmp_path / "run"
        code = run_cli("pipeline", "--config", config_path, "--out-dir", out_dir,
                       "--stages", "ingest,knn")
        assert code == 0
        capsys.readouterr()
        code = run_cli("pipeline", "--config", config_path, "--out-dir", out_dir,
                       "--stages", "eval")
        assert code == 0
        assert "BLEU" in capsys.readouterr().out
        scores = read_json(out_dir / "scores.json")
        assert "knn_consensus" in scores and "bleu" in scores["knn_consensus"]

    def test_bad_stage_name(self, fixture_dir, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({
            "seed": 3,
            "paths": {
                "captions": str(fixture_dir / "captions.json"),
                "features": str(fixture_dir / "features.fvec"),
            },
            "split": [30, 5, 5],
        }))
        code = run_cli("pipeline", "--config", config_path,
                       "--out-dir", tmp_path / "x", "--stages", "nope")
        assert code == 2

    def test_decode_before_training_exits_2(self, fixture_dir, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({
            "seed": 3,
            "paths": {
                "captions": str(fixture_dir / "captions.json"),
                "features": str(fixture_dir / "features.fvec"),
                "detections": str(fixture_dir / "detections.jsonl"),
            },
            "split": [30, 5, 5],
        }))
        out_dir = tmp_path / "run"
        code = run_cli("pipeline", "--config", config_path, "--out-dir", out_dir,
                       "--stages", "ingest")
        assert code == 0
        code = run_cli("pipeline", "--config", config_path, "--out-dir", out_dir,
                       "--stages", "decode")
        assert code == 2
        doc = json.loads(capsys.readouterr().err.strip())
        assert "me.model" in doc["message"]

    def test_hyperparameter_out_of_range(self, fixture_dir, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({
            "seed": 3,
            "paths": {
                "captions": str(fixture_dir / "captions.json"),
                "features": str(fixture_dir / "features.fvec"),
            },
            "split": [30, 5, 5],
            "hyperparameters": {"alpha": 3.0},
        }))
        code = run_cli("pipeline", "--config", config_path, "--out-dir", tmp_path / "y")
        assert code == 2
