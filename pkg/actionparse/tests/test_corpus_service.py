"""
Tests for corpus files, rephrase remapping, agreement filtering, statistics and mixed sampling
"""

import json

import pytest

from config import settings
from services.corpus_service import (
    AnnotationTriple,
    Example,
    ExampleSource,
    MixedSampler,
    SamplerState,
    action_categories,
    action_frequency_stats,
    agreement_filter,
    apply_rephrases,
    empirical_distribution,
    filter_annotations,
    load_distribution,
    read_annotation_triples,
    read_corpus_header,
    read_examples,
    read_rephrase_annotations,
    shared_distribution,
    substitute_rephrase_spans,
    write_examples,
)
from services.grammar_service import BUILD_COPY, BUILD_NEW, make_tree, serialize_tree
from utils.errors import CorpusFormatError, RephraseError, SamplerConfigError

REPHRASE = "please grab that red cube two times"


def _example(schema, sentence, verb, **spans):
    tokens = sentence.split()
    return Example(tuple(tokens), make_tree(schema, len(tokens), {"cmd:verb": verb}, spans))


def _write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


@pytest.fixture
def original(toy_tree):
    return Example(("take", "the", "cube", "twice"), toy_tree)


class TestCorpusFiles:
    def test_write_then_read(self, toy_schema, original, tmp_path):
        examples = [original, _example(toy_schema, "go now", "Go")]
        path = tmp_path / "train.tsv"
        assert write_examples(examples, path, toy_schema, {"split": "train", "seed": 1}) == 2

        assert read_corpus_header(path) == {"seed": 1, "split": "train"}
        assert read_examples(path, toy_schema) == examples
        assert path.read_text(encoding="utf-8").splitlines()[1] == (
            'take the cube twice\t{"Take": {"target": {"side": "LEFT", "name": [1,2]}, "count": [3,3]}}')

    def test_source_and_blank_lines(self, toy_schema, tmp_path):
        path = tmp_path / "c.tsv"
        path.write_text('\ngo now\t{"Go": {}}\n\n', encoding="utf-8")
        examples = read_examples(path, toy_schema, ExampleSource.PROMPT)
        assert [e.source for e in examples] == [ExampleSource.PROMPT]
        assert read_corpus_header(path) is None

    @pytest.mark.parametrize("bad_line", [
        "go now",
        '\t{"Go": {}}',
        'go now\t{"Go": {"count": [0,5]}}',
        'go now\t{"Fly": {}}',
        'go now\t{"Go": {"target": {}}',
    ])
    def test_malformed_line_number(self, toy_schema, tmp_path, bad_line):
        path = tmp_path / "c.tsv"
        path.write_text('# {"seed": 0}\ngo now\t{"Go": {}}\n' + bad_line + "\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError) as exc:
            read_examples(path, toy_schema)
        assert exc.value.line_number == 3

    def test_empty_file(self, toy_schema, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("", encoding="utf-8")
        assert read_examples(path, toy_schema) == []

    def test_from_text_tokenizes(self, toy_tree):
        example = Example.from_text("Take the cube, twice!", toy_tree)
        assert example.tokens == ("take", "the", "cube", ",", "twice", "!")


class TestRephrases:
    """Span remapping onto crowd rephrases"""

    def test_substitution(self, original):
        rephrased = substitute_rephrase_spans(original, REPHRASE, {"target:name": (3, 4), "cmd:count": (5, 6)})
        assert rephrased.source == ExampleSource.REPHRASE
        assert rephrased.tree.sentence_length == 7
        assert rephrased.tree.active == original.tree.active
        assert rephrased.tree.categories == original.tree.categories
        assert rephrased.tree.spans == {"target:name": (3, 4), "cmd:count": (5, 6)}

    def test_missing_node(self, original):
        with pytest.raises(RephraseError) as exc:
            substitute_rephrase_spans(original, REPHRASE, {"target:name": (3, 4)})
        assert exc.value.node_id == "cmd:count"

    def test_unexpected_node(self, original):
        with pytest.raises(RephraseError) as exc:
            substitute_rephrase_spans(original, REPHRASE,
                                      {"target:name": (3, 4), "cmd:count": (5, 6), "target:side": (0, 0)})
        assert exc.value.node_id == "target:side"

    def test_out_of_bounds(self, original):
        with pytest.raises(RephraseError) as exc:
            substitute_rephrase_spans(original, REPHRASE, {"target:name": (3, 4), "cmd:count": (5, 7)})
        assert exc.value.node_id == "cmd:count"
        with pytest.raises(RephraseError):
            substitute_rephrase_spans(original, REPHRASE, {"target:name": (4, 3), "cmd:count": (5, 6)})

    def test_empty_rephrase(self, original):
        with pytest.raises(RephraseError):
            substitute_rephrase_spans(original, "   ", {})

    def test_annotation_file(self, toy_schema, original, tmp_path):
        path = _write_lines(tmp_path / "rephrases.jsonl", [
            {"sentence": original.sentence, "tree": serialize_tree(original.tree, toy_schema),
             "rephrase": REPHRASE, "spans": {"target:name": [3, 4], "cmd:count": [5, 6]}},
            {"sentence": "go now", "tree": {"Go": {}}, "rephrase": "move it", "spans": {}},
        ])
        examples = apply_rephrases(read_rephrase_annotations(path, toy_schema), toy_schema)
        assert [e.sentence for e in examples] == [REPHRASE, "move it"]
        assert examples[1].tree.categories == {"cmd:verb": "Go"}

    def test_bad_annotation_record(self, toy_schema, tmp_path):
        path = _write_lines(tmp_path / "rephrases.jsonl", [
            {"sentence": "go now", "tree": {"Go": {}}, "rephrase": "move", "spans": {}},
            {"sentence": "go now", "rephrase": "move"},
        ])
        with pytest.raises(CorpusFormatError) as exc:
            read_rephrase_annotations(path, toy_schema)
        assert exc.value.line_number == 2


class TestAgreement:
    def test_two_of_three(self, toy_schema, toy_tree):
        other = make_tree(toy_schema, 4, {"cmd:verb": "Go"})
        triple = AnnotationTriple(("t",) * 4, (other, toy_tree, toy_tree))
        assert agreement_filter(triple) == toy_tree

    def test_order_does_not_matter(self, toy_schema, toy_tree):
        other = make_tree(toy_schema, 4, {"cmd:verb": "Go"})
        for trees in ((toy_tree, toy_tree, other), (toy_tree, other, toy_tree), (other, toy_tree, toy_tree)):
            assert agreement_filter(AnnotationTriple(("t",) * 4, trees)) == toy_tree

    def test_no_majority(self, toy_schema, toy_tree):
        trees = (toy_tree, make_tree(toy_schema, 4, {"cmd:verb": "Go"}), make_tree(toy_schema, 4, {"cmd:verb": "Stop"}))
        assert agreement_filter(AnnotationTriple(("t",) * 4, trees)) is None

    def test_annotation_file(self, toy_schema, tmp_path):
        path = _write_lines(tmp_path / "triples.jsonl", [
            {"sentence": "go now", "trees": ['{"Go": {}}', '{"Go": {}}', '{"Stop": {}}']},
            {"sentence": "stop", "trees": ['{"Go": {}}', '{"Take": {}}', '{"Stop": {}}']},
        ])
        kept = filter_annotations(read_annotation_triples(path, toy_schema))
        assert len(kept) == 1
        assert kept[0].tokens == ("go", "now")
        assert kept[0].source == ExampleSource.PROMPT
        assert kept[0].tree.categories == {"cmd:verb": "Go"}

    def test_triple_needs_three_trees(self, toy_schema, tmp_path):
        path = _write_lines(tmp_path / "triples.jsonl", [
            {"sentence": "go now", "trees": ['{"Go": {}}', '{"Go": {}}', '{"Go": {}}']},
            {"sentence": "go now", "trees": ['{"Go": {}}', '{"Go": {}}']},
        ])
        with pytest.raises(CorpusFormatError) as exc:
            read_annotation_triples(path, toy_schema)
        assert exc.value.line_number == 2

    def test_malformed_json(self, toy_schema, tmp_path):
        path = tmp_path / "triples.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError) as exc:
            read_annotation_triples(path, toy_schema)
        assert exc.value.line_number == 1


class TestStatistics:
    def test_categories(self, reference_schema, toy_schema):
        columns = action_categories(reference_schema)
        assert columns[:2] == [BUILD_NEW, BUILD_COPY]
        assert "Build" not in columns
        assert action_categories(toy_schema) == ["Go", "Take", "Stop"]

    def test_histogram(self, reference_schema, figure_tree):
        copy = make_tree(reference_schema, 3, {"action:action_type": "Build"}, {"action_ref_object:has_name_": (1, 2)})
        stop = make_tree(reference_schema, 1, {"action:action_type": "Stop"})
        examples = [Example(("w",) * 14, figure_tree), Example(("w",) * 3, copy),
                    Example(("stop",), stop), Example(("halt",), stop)]

        histogram = action_frequency_stats(examples, reference_schema)
        assert histogram.total == 4
        assert histogram.counts[BUILD_NEW] == 1
        assert histogram.counts[BUILD_COPY] == 1
        assert histogram.counts["Stop"] == 2
        assert histogram.counts["Move"] == 0
        assert histogram.fractions()["Stop"] == 0.5
        assert histogram.to_series().dtype == "int64"
        assert histogram.to_dict()["total"] == 4
        assert empirical_distribution(examples, reference_schema) == {BUILD_NEW: 0.25, BUILD_COPY: 0.25, "Stop": 0.5}

    def test_build_split_and_empty_corpus(self, reference_schema):
        new = make_tree(reference_schema, 2, {"action:action_type": "Build"}, {"schematic:has_name_": (1, 1)})
        copy = make_tree(reference_schema, 2, {"action:action_type": "Build"}, {"action_ref_object:has_name_": (1, 1)})
        move = make_tree(reference_schema, 2, {"action:action_type": "Move"})
        trees = [new, new, copy, move, move]
        counts = action_frequency_stats([Example(("w", "w"), t) for t in trees], reference_schema).counts
        assert {k: v for k, v in counts.items() if v} == {BUILD_NEW: 2, BUILD_COPY: 1, "Move": 2}

        empty = action_frequency_stats([], reference_schema)
        assert empty.total == 0
        assert set(empty.counts.values()) == {0}

    def test_load_distribution(self, tmp_path):
        prompts = load_distribution(settings.distribution_path("prompts"))
        assert sum(prompts.values()) == pytest.approx(1.0)
        assert prompts[BUILD_NEW] == pytest.approx(0.30)

        flat = tmp_path / "flat.json"
        flat.write_text('{"Go": 1, "Take": 3}', encoding="utf-8")
        assert load_distribution(flat) == {"Go": 0.25, "Take": 0.75}

    @pytest.mark.parametrize("text", ['{"distribution": {}}', '{"Go": -1, "Take": 2}', '[1, 2]', '{"Go": 0}'])
    def test_bad_distribution(self, tmp_path, text):
        path = tmp_path / "d.json"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(SamplerConfigError):
            load_distribution(path)


@pytest.fixture
def pools(toy_schema):
    return {
        "templates": [_example(toy_schema, "take it", "Take"), _example(toy_schema, "take that", "Take"),
                      _example(toy_schema, "take this", "Take"), _example(toy_schema, "go", "Go")],
        "rephrases": [_example(toy_schema, "grab it", "Take"), _example(toy_schema, "walk", "Go")],
    }


class TestMixedSampler:
    """Alternating pools with per-category reshuffled queues"""

    def test_pools_alternate(self, pools, toy_schema):
        sampler = MixedSampler(pools, {"Take": 0.5, "Go": 0.5}, toy_schema, seed=1)
        for i, example in enumerate(sampler.batch(20)):
            expected = "templates" if i % 2 == 0 else "rephrases"
            assert example in pools[expected]

    def test_target_frequencies(self, pools, toy_schema):
        sampler = MixedSampler({"templates": pools["templates"]}, {"Take": 0.25, "Go": 0.75}, toy_schema, seed=2)
        draws = sampler.batch(10_000)
        take = sum(1 for e in draws if e.tree.categories["cmd:verb"] == "Take") / len(draws)
        assert abs(take - 0.25) < 3 * (0.25 * 0.75 / len(draws)) ** 0.5

    def test_mixed_pool_frequencies(self, pools, toy_schema):
        sampler = MixedSampler(pools, {"Take": 0.6, "Go": 0.4}, toy_schema, seed=12)
        draws = sampler.batch(10_000)
        take = sum(1 for e in draws if e.tree.categories["cmd:verb"] == "Take") / len(draws)
        assert abs(take - 0.6) < 3 * (0.6 * 0.4 / len(draws)) ** 0.5

    def test_each_epoch_is_a_permutation(self, pools, toy_schema):
        sampler = MixedSampler({"templates": pools["templates"]}, {"Take": 1.0}, toy_schema, seed=3)
        takes = pools["templates"][:3]
        first, second = sampler.batch(3), sampler.batch(3)
        assert sorted(e.sentence for e in first) == sorted(e.sentence for e in takes)
        assert sorted(e.sentence for e in second) == sorted(e.sentence for e in takes)
        assert sampler.state.epochs[("templates", "Take")] == 2

    def test_state_round_trip(self, pools, toy_schema):
        target = {"Take": 0.5, "Go": 0.5}
        sampler = MixedSampler(pools, target, toy_schema, seed=4)
        sampler.batch(7)
        saved = json.loads(json.dumps(sampler.state.to_dict()))
        expected = sampler.batch(12)

        restored = MixedSampler(pools, target, toy_schema, seed=99)
        restored.state = SamplerState.from_dict(saved)
        assert restored.batch(12) == expected

    def test_same_seed_same_stream(self, pools, toy_schema):
        target = {"Take": 0.5, "Go": 0.5}
        first = MixedSampler(pools, target, toy_schema, seed=5)
        second = MixedSampler(pools, target, toy_schema, seed=5)
        assert first.batch(15) == [example for example, _ in zip(second, range(15))]

    def test_config_errors(self, pools, toy_schema):
        with pytest.raises(SamplerConfigError):
            MixedSampler({}, {"Take": 1.0}, toy_schema)
        with pytest.raises(SamplerConfigError):
            MixedSampler(pools, {"Take": 0.5, "Go": 0.4}, toy_schema)
        with pytest.raises(SamplerConfigError):
            MixedSampler(pools, {"Take": 0.5, "Stop": 0.5}, toy_schema)

    def test_zero_weight_category_may_be_missing(self, pools, toy_schema):
        sampler = MixedSampler(pools, {"Take": 1.0, "Stop": 0.0}, toy_schema)
        assert sampler.spec.categories == ["Take"]


class TestSharedDistribution:
    def test_restricted_to_categories_of_every_pool(self, pools, toy_schema):
        pools = {**pools, "prompts": [_example(toy_schema, "take", "Take"), _example(toy_schema, "stop", "Stop")]}
        assert shared_distribution(pools, toy_schema) == {"Take": 1.0}

    def test_renormalised(self, pools, toy_schema):
        assert shared_distribution(pools, toy_schema) == {"Take": 0.75, "Go": 0.25}

    def test_disjoint_pools(self, toy_schema):
        pools = {"templates": [_example(toy_schema, "go", "Go")],
                 "rephrases": [_example(toy_schema, "stop", "Stop")]}
        with pytest.raises(SamplerConfigError) as excinfo:
            shared_distribution(pools, toy_schema)
        assert excinfo.value.context["pools"] == {"templates": ["Go"], "rephrases": ["Stop"]}
