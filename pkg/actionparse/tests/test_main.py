"""
Tests for the command line
"""

import json

import pytest

from main import EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from services.corpus_service import Example, write_examples
from services.grammar_service import deserialize_tree, make_tree, serialize_tree
from services.parser_service import ParserModel

SMALL_SPLITS = ["--train", "6", "--valid", "2", "--test", "2"]


@pytest.fixture
def checkpoint(reference_schema, tiny_hyper, tmp_path):
    vocabulary = ["build", "a", "house", "stop", "the", "cube"]
    return ParserModel.build(reference_schema, vocabulary, tiny_hyper, "sentencerec", seed=0).save(
        tmp_path / "model.npz")


@pytest.fixture
def corpus(reference_schema, figure_tree, tmp_path):
    stop = make_tree(reference_schema, 1, {"action:action_type": "Stop"})
    examples = [
        Example(tuple("make three oak wood houses to the left of the dark grey church .".split()), figure_tree),
        Example(("stop",), stop),
        Example(("halt",), stop),
    ]
    path = tmp_path / "corpus.tsv"
    write_examples(examples, path, reference_schema, {"split": "test"})
    return path


class TestGenerate:
    def test_same_seed_gives_identical_files(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(["generate", *SMALL_SPLITS, "--seed", "3", "--output-dir", str(tmp_path / name)]) == EXIT_OK
        for name in ("train.tsv", "valid.tsv", "test.tsv", "stats.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "total    6" in capsys.readouterr().out

    def test_other_seed_differs(self, tmp_path):
        run(["generate", *SMALL_SPLITS, "--seed", "3", "--output-dir", str(tmp_path / "a")])
        run(["generate", *SMALL_SPLITS, "--seed", "4", "--output-dir", str(tmp_path / "b")])
        assert (tmp_path / "a" / "train.tsv").read_bytes() != (tmp_path / "b" / "train.tsv").read_bytes()

    def test_zero_size_is_a_usage_error(self, tmp_path):
        assert run(["generate", "--train", "0", "--output-dir", str(tmp_path)]) == EXIT_USAGE
        assert not (tmp_path / "train.tsv").exists()


class TestUsageErrors:
    def test_unknown_variant(self, tmp_path):
        assert run(["train", "--variant", "bogus", "--output-dir", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_command(self):
        assert run(["frobnicate"]) == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        config = tmp_path / "run.json"
        config.write_text('{"noop_fraction": 3.0}', encoding="utf-8")
        assert run(["--config", str(config), "generate", "--output-dir", str(tmp_path)]) == EXIT_USAGE


class TestTrain:
    def test_pools_without_a_shared_category(self, reference_schema, tmp_path):
        stop = make_tree(reference_schema, 1, {"action:action_type": "Stop"})
        undo = make_tree(reference_schema, 1, {"action:action_type": "Undo"})
        for name, example in (("train", Example(("stop",), stop)), ("valid", Example(("stop",), stop)),
                              ("rephrases", Example(("undo",), undo))):
            write_examples([example], tmp_path / f"{name}.tsv", reference_schema, {"split": name})
        assert run(["train", "--steps", "1", "--output-dir", str(tmp_path),
                    "--pool", str(tmp_path / "rephrases.tsv")]) == EXIT_DATA
        assert not (tmp_path / "model.npz").exists()


class TestParse:
    def test_empty_input(self, checkpoint, tmp_path, capsys):
        empty = tmp_path / "empty.txt"
        empty.write_text("", encoding="utf-8")
        assert run(["parse", "--checkpoint", str(checkpoint), "--input", str(empty)]) == EXIT_OK
        assert capsys.readouterr().out == ""

    def test_one_document_per_sentence(self, checkpoint, reference_schema, tmp_path, capsys):
        sentences = tmp_path / "in.txt"
        sentences.write_text("build a house\n\nstop the cube now!\n", encoding="utf-8")
        probs = tmp_path / "probs.jsonl"
        assert run(["parse", "--checkpoint", str(checkpoint), "--input", str(sentences),
                    "--probs", str(probs)]) == EXIT_OK

        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 2
        trees = [deserialize_tree(line, reference_schema) for line in lines]
        assert all(serialize_tree(tree, reference_schema) == line for tree, line in zip(trees, lines))

        records = [json.loads(line) for line in probs.read_text(encoding="utf-8").splitlines()]
        assert [r["sentence"] for r in records] == ["build a house", "stop the cube now !"]
        assert "action:action_type" in records[0]["probabilities"]

    def test_beam_matches_document_format(self, checkpoint, reference_schema, tmp_path, capsys):
        sentences = tmp_path / "in.txt"
        sentences.write_text("build a house\n", encoding="utf-8")
        assert run(["parse", "--checkpoint", str(checkpoint), "--input", str(sentences), "--beam", "3"]) == EXIT_OK
        line = capsys.readouterr().out.strip()
        assert serialize_tree(deserialize_tree(line, reference_schema), reference_schema) == line

    def test_missing_checkpoint(self, tmp_path):
        sentences = tmp_path / "in.txt"
        sentences.write_text("stop\n", encoding="utf-8")
        assert run(["parse", "--checkpoint", str(tmp_path / "none.npz"), "--input", str(sentences)]) == EXIT_DATA


class TestEval:
    def test_writes_report(self, checkpoint, corpus, tmp_path, capsys):
        out = tmp_path / "eval"
        assert run(["eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus),
                    "--output-dir", str(out)]) == EXIT_OK
        document = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        assert document["metrics"]["examples"] == 3
        assert document["beam_width"] == 1
        assert (out / "confusion.txt").read_text(encoding="utf-8").startswith("# config_digest: ")
        assert "Tree accuracy:" in capsys.readouterr().out

    def test_beam_reports_monotone_fraction(self, checkpoint, corpus, tmp_path):
        out = tmp_path / "eval"
        assert run(["eval", "--checkpoint", str(checkpoint), "--corpus", str(corpus),
                    "--beam", "2", "--output-dir", str(out)]) == EXIT_OK
        document = json.loads((out / "metrics.json").read_text(encoding="utf-8"))
        assert 0.0 <= document["beam_monotone_fraction"] <= 1.0

    def test_checkpoint_for_another_schema(self, make_toy_model, corpus, tmp_path):
        toy_checkpoint = make_toy_model().save(tmp_path / "toy.npz")
        assert run(["eval", "--checkpoint", str(toy_checkpoint), "--corpus", str(corpus),
                    "--output-dir", str(tmp_path / "eval")]) == EXIT_DATA

    def test_missing_corpus(self, checkpoint, tmp_path):
        assert run(["eval", "--checkpoint", str(checkpoint), "--corpus", str(tmp_path / "missing.tsv"),
                    "--output-dir", str(tmp_path)]) == EXIT_DATA


class TestCorpusCommands:
    def test_stats(self, corpus, capsys):
        assert run(["stats", str(corpus)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Build-New" in out
        assert "corpus.tsv" in out

    def test_stats_on_malformed_corpus(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("no tab here\n", encoding="utf-8")
        assert run(["stats", str(bad)]) == EXIT_DATA

    def test_agree(self, tmp_path, capsys):
        annotations = tmp_path / "triples.jsonl"
        annotations.write_text(
            json.dumps({"sentence": "stop", "trees": ['{"Stop": {}}', '{"Stop": {}}', '{"Undo": {}}']}) + "\n"
            + json.dumps({"sentence": "what", "trees": ['{"Noop": {}}', '{"Stop": {}}', '{"Undo": {}}']}) + "\n",
            encoding="utf-8")
        output = tmp_path / "agreed.tsv"
        assert run(["agree", str(annotations), str(output), "--source", "interactive"]) == EXIT_OK
        assert "1 of 2" in capsys.readouterr().out
        lines = output.read_text(encoding="utf-8").splitlines()
        assert json.loads(lines[0][2:])["source"] == "interactive"
        assert lines[1] == 'stop\t{"Stop": {}}'

    def test_rephrase(self, reference_schema, tmp_path, capsys):
        tree = make_tree(reference_schema, 3, {"action:action_type": "Destroy"}, {"action_ref_object:has_name_": (2, 2)})
        annotations = tmp_path / "rephrases.jsonl"
        annotations.write_text(json.dumps({
            "sentence": "destroy the house", "tree": serialize_tree(tree, reference_schema),
            "rephrase": "please knock that hut down", "spans": {"action_ref_object:has_name_": [3, 3]},
        }) + "\n", encoding="utf-8")
        output = tmp_path / "rephrased.tsv"
        assert run(["rephrase", str(annotations), str(output)]) == EXIT_OK
        assert "1 rephrased examples" in capsys.readouterr().out
        line = output.read_text(encoding="utf-8").splitlines()[1]
        assert line == 'please knock that hut down\t{"Destroy": {"reference_object": {"has_name_": [3,3]}}}'

    def test_rephrase_with_bad_span(self, reference_schema, tmp_path):
        tree = make_tree(reference_schema, 3, {"action:action_type": "Destroy"}, {"action_ref_object:has_name_": (2, 2)})
        annotations = tmp_path / "rephrases.jsonl"
        annotations.write_text(json.dumps({
            "sentence": "destroy the house", "tree": serialize_tree(tree, reference_schema),
            "rephrase": "knock it down", "spans": {"action_ref_object:has_name_": [3, 3]},
        }) + "\n", encoding="utf-8")
        assert run(["rephrase", str(annotations), str(tmp_path / "out.tsv")]) == EXIT_DATA


@pytest.mark.integration
@pytest.mark.slow
class TestPipeline:
    def test_generate_train_eval_parse(self, tmp_path, capsys):
        out = str(tmp_path)
        assert run(["generate", *SMALL_SPLITS, "--seed", "1", "--output-dir", out]) == EXIT_OK
        assert run(["train", "--steps", "2", "--d", "4", "--heads", "2", "--free-dims", "2",
                    "--batch-size", "2", "--eval-interval", "1", "--seed", "1", "--output-dir", out]) == EXIT_OK
        assert (tmp_path / "model.npz").exists()
        assert len(json.loads((tmp_path / "curve.json").read_text(encoding="utf-8"))["curve"]) == 3

        assert run(["eval", "--output-dir", out]) == EXIT_OK
        assert (tmp_path / "metrics.json").exists()

        sentences = tmp_path / "in.txt"
        sentences.write_text("build a red house\n", encoding="utf-8")
        capsys.readouterr()
        assert run(["parse", "--checkpoint", str(tmp_path / "model.npz"), "--input", str(sentences)]) == EXIT_OK
        assert len(capsys.readouterr().out.splitlines()) == 1


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """Generate, train and evaluate at desk scale once for the acceptance checks"""
    out = tmp_path_factory.mktemp("desk")
    assert run(["generate", "--train", "20000", "--valid", "1000", "--test", "1000", "--seed", "7",
                "--output-dir", str(out)]) == EXIT_OK
    assert run(["train", "--variant", "sentencerec", "--d", "64", "--heads", "2", "--free-dims", "8",
                "--steps", "6000", "--seed", "7", "--output-dir", str(out)]) == EXIT_OK
    assert run(["eval", "--output-dir", str(out)]) == EXIT_OK
    return out


@pytest.mark.integration
@pytest.mark.slow
class TestAcceptance:
    def test_template_accuracy(self, desk_run):
        document = json.loads((desk_run / "metrics.json").read_text(encoding="utf-8"))
        assert document["metrics"]["tree_accuracy"] >= 0.95

    def test_go_a_little_to_the_left(self, desk_run, reference_schema, capsys):
        sentences = desk_run / "move.txt"
        sentences.write_text("go a little to the left\n", encoding="utf-8")
        capsys.readouterr()
        assert run(["parse", "--checkpoint", str(desk_run / "model.npz"), "--input", str(sentences)]) == EXIT_OK
        tree = deserialize_tree(capsys.readouterr().out.strip(), reference_schema, sentence_length=6)
        assert tree.categories["action:action_type"] == "Move"
        assert tree.categories["action_location:relative_direction"] == "LEFT"
