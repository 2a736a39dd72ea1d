import json

import numpy as np
import pytest

from conftest import TINY_DIALECTS, TINY_SYNTH
from speechllm.data import (
    DialectParams,
    SynthConfig,
    Utterance,
    default_dialects,
    read_manifest,
    split_corpus,
    symbol_templates,
    synth_corpus,
    write_manifest,
)
from speechllm.errors import ConfigError, ManifestParseError
from speechllm.metrics import CerReport, UtteranceResult, cer


def test_same_seed_is_bit_identical():
    a = synth_corpus(3, 12, TINY_DIALECTS, TINY_SYNTH)
    b = synth_corpus(3, 12, TINY_DIALECTS, TINY_SYNTH)
    assert a == b
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))
    assert synth_corpus(4, 12, TINY_DIALECTS, TINY_SYNTH) != a


def test_corpus_shape_and_tags():
    corpus = synth_corpus(0, 30, default_dialects())
    cfg = SynthConfig()
    assert [u.utt_id for u in corpus[:2]] == ["utt000000", "utt000001"]
    assert {u.dialect for u in corpus} == {"standard", "accent", "dialect"}
    for u in corpus:
        assert cfg.min_len <= len(u.transcript) <= cfg.max_len
        assert set(u.transcript) <= set(cfg.alphabet)
        assert u.features.shape == (len(u.transcript) * cfg.frames_per_symbol, cfg.feature_dim)
        assert u.features.dtype == np.float32


def test_prefix_stability():
    # utterance i depends only on (seed, i), so a larger corpus extends a smaller one
    small = synth_corpus(2, 5, TINY_DIALECTS, TINY_SYNTH)
    assert synth_corpus(2, 9, TINY_DIALECTS, TINY_SYNTH)[:5] == small


@pytest.mark.parametrize("kwargs", [
    {"dialects": []},
    {"n_utts": 0},
    {"dialects": [DialectParams("x"), DialectParams("x")]},
    {"dialects": [DialectParams("x", substitutions={"a": "z"})]},
])
def test_synth_corpus_errors(kwargs):
    args = {"seed": 0, "n_utts": 3, "dialects": TINY_DIALECTS, "cfg": TINY_SYNTH, **kwargs}
    with pytest.raises(ConfigError):
        synth_corpus(**args)


def test_param_validation():
    with pytest.raises(ConfigError):
        DialectParams("x", noise=-0.1)
    with pytest.raises(ConfigError):
        DialectParams("x", substitutions={"a": "b", "c": "b"})
    with pytest.raises(ConfigError):
        SynthConfig(alphabet="aab")
    with pytest.raises(ConfigError):
        SynthConfig(min_len=5, max_len=4)
    with pytest.raises(ConfigError):
        Utterance("u", np.zeros((4, 2)), "", "standard")


@pytest.mark.parametrize("seed", [None, 0, 17])
def test_rotation_is_orthonormal(seed):
    R = DialectParams("x", rotation_seed=seed).rotation(16)
    np.testing.assert_allclose(R @ R.T, np.eye(16), atol=1e-12)


def test_dialects_shift_feature_distribution():
    corpus = synth_corpus(0, 300, default_dialects())
    means = {}
    for tag in ("standard", "accent", "dialect"):
        means[tag] = np.concatenate([u.features for u in corpus if u.dialect == tag]).mean(axis=0)
    assert np.abs(means["standard"] - means["accent"]).max() > 0.2
    assert np.abs(means["standard"] - means["dialect"]).max() > 0.2


def test_split_is_contiguous_and_disjoint():
    corpus = synth_corpus(0, 20, TINY_DIALECTS, TINY_SYNTH)
    tr, dev, te = split_corpus(corpus)
    assert (len(tr), len(dev), len(te)) == (16, 2, 2)
    ids = [u.utt_id for u in tr + dev + te]
    assert ids == [u.utt_id for u in corpus] and len(set(ids)) == 20


# -- manifests ----------------------------------------------------------------------


@pytest.mark.parametrize("external", [False, True])
def test_manifest_round_trip(tmp_path, external):
    corpus = synth_corpus(1, 8, TINY_DIALECTS, TINY_SYNTH)
    path = write_manifest(corpus, tmp_path / "m.jsonl", tmp_path / "feats" if external else None)
    back = list(read_manifest(path))
    assert back == corpus
    if external:
        rec = json.loads(path.read_text().splitlines()[0])
        assert rec["feature_file"] == "feats/utt000000.bin"


def test_manifest_is_streaming(tmp_path):
    corpus = synth_corpus(1, 3, TINY_DIALECTS, TINY_SYNTH)
    path = write_manifest(corpus, tmp_path / "m.jsonl")
    with open(path, "a") as fh:
        fh.write("not json\n")
    it = read_manifest(path)
    assert next(it) == corpus[0]  # good records are usable before the bad line is reached
    with pytest.raises(ManifestParseError):
        list(it)


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert list(read_manifest(tmp_path / "m.jsonl")) == []


def test_extra_fields_are_ignored(tmp_path):
    rec = {"transcript": "ab", "dialect": "standard", "features": [[0.0, 1.0]] * 4, "speaker": "s1", "v": 2}
    (tmp_path / "m.jsonl").write_text(json.dumps(rec) + "\n")
    (u,) = read_manifest(tmp_path / "m.jsonl")
    assert u.transcript == "ab" and u.features.shape == (4, 2) and u.utt_id == "m-1"


@pytest.mark.parametrize("line,field", [
    ({"dialect": "x", "features": [[0.0]]}, "transcript"),
    ({"transcript": "a", "features": [[0.0]]}, "dialect"),
    ({"transcript": "a", "dialect": "x"}, "features"),
    ({"transcript": "a", "dialect": "x", "features": [0.0, 1.0]}, "features"),
    ({"transcript": "", "dialect": "x", "features": [[0.0]]}, "transcript"),
])
def test_manifest_errors_name_field_and_line(tmp_path, line, field):
    good = {"transcript": "a", "dialect": "x", "features": [[0.0]]}
    (tmp_path / "m.jsonl").write_text(json.dumps(good) + "\n\n" + json.dumps(line) + "\n")
    with pytest.raises(ManifestParseError) as err:
        list(read_manifest(tmp_path / "m.jsonl"))
    assert err.value.line_no == 3 and err.value.field == field
    assert "line 3" in str(err.value)


def test_manifest_rejects_non_objects(tmp_path):
    (tmp_path / "m.jsonl").write_text("[1, 2]\n")
    with pytest.raises(ManifestParseError) as err:
        list(read_manifest(tmp_path / "m.jsonl"))
    assert err.value.line_no == 1


# -- lexical dialects and a standard-only decoder -----------------------------------


def _template_decoder(cfg, standard):
    """Nearest-template recogniser built from standard-dialect utterances only."""
    sums, counts = {}, {}
    F = cfg.frames_per_symbol
    for u in standard:
        for j, c in enumerate(u.transcript):
            sums[c] = sums.get(c, 0) + u.features[j * F:(j + 1) * F]
            counts[c] = counts.get(c, 0) + 1
    symbols = sorted(sums)
    bank = np.stack([sums[c] / counts[c] for c in symbols])

    def decode(u):
        blocks = u.features.reshape(-1, F, cfg.feature_dim)
        d = ((blocks[:, None] - bank[None]) ** 2).sum(axis=(2, 3))
        return "".join(symbols[i] for i in d.argmin(axis=1))

    return decode


def test_disjoint_substitution_tables_give_different_cer():
    cfg = SynthConfig(alphabet="abcdefgh", feature_dim=8, min_len=5, max_len=10)
    dialects = [
        DialectParams("standard"),
        DialectParams("swap_ab", substitutions={"a": "b", "b": "a"}),
        DialectParams("swap_cdef", substitutions={"c": "d", "d": "c", "e": "f", "f": "e"}),
    ]
    corpus = synth_corpus(0, 300, dialects, cfg)
    decode = _template_decoder(cfg, [u for u in corpus if u.dialect == "standard"])
    report = CerReport([UtteranceResult(u.utt_id, u.dialect, u.transcript, decode(u), cer(decode(u), u.transcript))
                        for u in corpus])
    rates = report.by_dialect()
    assert rates["standard"] == 0.0  # the noiseless standard dialect is recognised perfectly
    assert rates["swap_ab"] > 0 and rates["swap_cdef"] > 0
    assert abs(rates["swap_ab"] - rates["swap_cdef"]) > 0.05
    # roughly the share of substituted symbols: 2/8 and 4/8
    assert rates["swap_ab"] == pytest.approx(0.25, abs=0.05)
    assert rates["swap_cdef"] == pytest.approx(0.5, abs=0.05)


def test_templates_depend_on_seed_only():
    cfg = SynthConfig(alphabet="abc", feature_dim=4, frames_per_symbol=2)
    a, b = symbol_templates(1, cfg), symbol_templates(1, cfg)
    assert all(np.array_equal(a[c], b[c]) for c in "abc")
    assert not np.array_equal(a["a"], symbol_templates(2, cfg)["a"])
