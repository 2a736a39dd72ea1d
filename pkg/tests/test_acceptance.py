"""Acceptance checks, one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` (or ``python tests/test_acceptance.py``).
The end-to-end benchmark trains the default configuration twice and takes
roughly a quarter of an hour on one core.
"""

import functools
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import gradsuite  # noqa: E402
from conftest import tiny_model_config, tiny_run_config, tiny_tokenizer  # noqa: E402
from test_ctc_kernels import all_cases, brute_force_ctc  # noqa: E402
from test_metrics import dp_distance  # noqa: E402
from speechllm import pipeline  # noqa: E402
from speechllm.autodiff import (  # noqa: E402
    AdamW,
    AdamWConfig,
    ParameterRegistry,
    Tensor,
    accumulate_and_step,
    adamw_update,
    clip_gradients,
    default_dtype,
    no_grad,
    parameter,
)
from speechllm.autodiff.checkpoint import load_checkpoint  # noqa: E402
from speechllm.cli import main as cli_main  # noqa: E402
from speechllm.config import RunConfig  # noqa: E402
from speechllm.encoder import EncoderConfig, FeatureSequence, SpeechEncoder, ctc_loss, encode  # noqa: E402
from speechllm.errors import CTCInfeasibleError  # noqa: E402
from speechllm.llm import DecoderLM, LLMConfig, apply_lora, merge_lora  # noqa: E402
from speechllm.metrics import CerReport, EditCounts, UtteranceResult, cer  # noqa: E402
from speechllm.model import SpeechLLM  # noqa: E402
from speechllm.projector import Bridge, ProjectorConfig, build_projector, project  # noqa: E402
from speechllm.stages import PlanConfig, TrainHParams, build_stage_plan, run_plan  # noqa: E402

RESULTS = {}
LINES = []  # reported by the terminal-summary hook in conftest, after capture ends


def criterion(number, title):
    """Run the check, print one PASS/FAIL line, and re-raise failures for pytest."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs) or ""
            except Exception as exc:
                RESULTS[number] = False
                _emit(f"criterion {number} [{title}]: FAIL ({type(exc).__name__}: {str(exc).splitlines()[0][:200]})")
                raise
            RESULTS[number] = True
            _emit(f"criterion {number} [{title}]: PASS ({detail}; {time.perf_counter() - t0:.1f}s)")

        return run

    return wrap


def _emit(line):
    LINES.append(line)


@criterion(1, "gradient suite")
def test_gradient_suite():
    t0 = time.perf_counter()
    cases = gradsuite.instances(5)
    worst = max(gradsuite.check_case(builder, seed) for builder, seed in cases)
    elapsed = time.perf_counter() - t0
    assert len(cases) >= 100
    assert worst < 1e-4, f"worst relative error {worst:.2e}"
    assert elapsed < 120, f"took {elapsed:.1f}s"
    return f"{len(cases)} instances, worst relative error {worst:.1e}"


@criterion(2, "CTC oracle")
def test_ctc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, n = 0.0, 0
    with default_dtype(np.float64):
        for V, T, target in all_cases():
            for scale in (0.0, 1.0, 3.0):
                logits = rng.standard_normal((T, V + 1)) * scale
                oracle = brute_force_ctc(logits, target)
                if math.isinf(oracle):
                    with pytest.raises(CTCInfeasibleError):
                        ctc_loss(Tensor(logits), list(target))
                    continue
                worst = max(worst, abs(float(ctc_loss(Tensor(logits), list(target)).data) - oracle))
                n += 1
        uniform = float(ctc_loss(Tensor(np.zeros((2, 3))), [0]).data)
    elapsed = time.perf_counter() - t0
    assert worst < 1e-6, f"max deviation {worst:.2e}"
    assert abs(uniform - math.log(3)) < 1e-6
    assert elapsed < 10
    return f"{n} feasible cases, max deviation {worst:.1e}, uniform T'=2 loss {uniform:.6f}"


@criterion(3, "frame-rate arithmetic")
def test_frame_rates():
    rng = np.random.default_rng(0)
    enc = SpeechEncoder(EncoderConfig(), rng)
    S = FeatureSequence(rng.standard_normal((400, 16)).astype(np.float32))
    bridge = Bridge(64, 128, rng)
    with no_grad():
        H = encode(enc, S)
        assert (len(H), H.frame_rate_hz) == (100, 25.0)
        for k, L, hz in ((4, 25, 6.25), (8, 12, 3.125)):
            for kind in ("linear", "conv1d", "transformer"):
                E = project(build_projector(64, ProjectorConfig(kind=kind, downsample_k=k), rng), bridge, H)
                assert (len(E), E.frame_rate_hz, E.vectors.shape[1]) == (L, hz, 128), (kind, k)
        q = build_projector(64, ProjectorConfig(kind="qformer"), rng)
        lengths = [1, 2, 3, 50, 100, 999, 4096, 10_000]
        for n in lengths:
            out, lens = q(np.zeros((1, n, 64), dtype=np.float32), [n])
            assert out.shape[1] == 64 and list(lens) == [64], n
    return "400 frames -> 100 @25Hz -> 25 @6.25Hz (k=4), 12 @3.125Hz (k=8); Q-Former 64 for 1..10000 frames"


@criterion(4, "freeze soundness")
def test_freeze_soundness(tmp_path):
    from speechllm.data import synth_corpus
    from conftest import TINY_DIALECTS, TINY_SYNTH

    data = synth_corpus(1, 24, TINY_DIALECTS, TINY_SYNTH)
    checked = []
    for stages in ([1, 2, 3], [1, 2, 3, 4]):
        model = SpeechLLM(tiny_model_config(), tiny_tokenizer(), seed=0)
        plan = build_stage_plan(PlanConfig(stages=stages, steps={i: 50 for i in stages}),
                                TrainHParams(lr=1e-3, micro_batch_size=4, n_accum=1))
        out = tmp_path / f"plan{len(stages)}"
        prev = model.state_dict()
        run_plan(model, data, plan, run_dir=out)
        for spec in plan.stages:
            arrays, _ = load_checkpoint(out / f"stage{spec.index}")
            changed = {n for n in arrays if arrays[n].tobytes() != prev[n].tobytes()}
            expected = {n for g in spec.trainable_groups for n in model.registry.groups[g].parameters}
            assert changed == expected, (stages, spec.index, sorted(changed ^ expected)[:5])
            prev = arrays
        checked.append(len(stages))
    return f"{checked[0]}-stage and {checked[1]}-stage plans, 50 steps per stage, bitwise diff"


@criterion(5, "LoRA invariants")
def test_lora_invariants():
    rng = np.random.default_rng(0)
    llm = DecoderLM(30, LLMConfig(), rng)
    inputs = [(Tensor(rng.standard_normal((1, 12, 128)).astype(np.float32)), np.arange(12)[None],
               rng.integers(0, 3, (1, 12))) for _ in range(100)]
    with no_grad():
        base = [llm.logits(llm(*x)).data for x in inputs[:20]]
        installed = apply_lora(llm, rank=12, alpha=32.0, rng=rng)
        zero = [llm.logits(llm(*x)).data for x in inputs[:20]]
        assert all(a.tobytes() == b.tobytes() for a, b in zip(base, zero))
        assert all(ad.scale == 32.0 / 12 for _, ad in installed)
        _, ad = installed[0]
        ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
        assert np.array_equal(ad.delta(), (32.0 / 12) * (ad.A.data @ ad.B.data))
        for _, ad in installed:
            ad.B.data = (0.05 * rng.standard_normal(ad.B.shape)).astype(np.float32)
        adapted = [llm.logits(llm(*x)).data for x in inputs]
        merge_lora(llm)
        merged = [llm.logits(llm(*x)).data for x in inputs]
    gap = max(np.abs(a - m).max() for a, m in zip(adapted, merged))
    assert gap < 1e-5, f"merge gap {gap:.2e}"
    return f"zero-init bitwise neutral, scale 32/12, merge gap {gap:.1e} over 100 inputs"


@criterion(6, "clipping, accumulation and AdamW")
def test_optimizer_rules():
    g = np.array([-12.0, -5.0, -4.999, 0.0, 3.5, 5.0, 5.0001, 1e9])
    np.testing.assert_array_equal(clip_gradients(g), [-5.0, -5.0, -4.999, 0.0, 3.5, 5.0, 5.0, 5.0])

    def problem():
        r = np.random.default_rng(0)
        reg = ParameterRegistry()
        w = parameter(r.standard_normal((3, 2)))
        reg.add("projector", "w", w)
        x, y = r.standard_normal((6, 3)), r.standard_normal((6, 2))

        def loss(batch):
            d = batch[0] @ w - batch[1]
            return (d * d).mean()

        return reg, w, (x, y), loss

    for n in (2, 5, 20):
        reg1, w1, b, loss1 = problem()
        accumulate_and_step([b] * n, n, loss1, AdamW(reg1, AdamWConfig(lr=1e-2)))
        reg2, w2, b, loss2 = problem()
        accumulate_and_step([b], 1, loss2, AdamW(reg2, AdamWConfig(lr=1e-2)))
        assert np.abs(w1.data - w2.data).max() < 1e-12, n
    p, _, _ = adamw_update(np.float64(1.0), np.float64(0.5), 0.0, 0.0, 1, AdamWConfig())
    hand = 1.0 - 1e-5 * (0.5 / (0.5 + 1e-6) + 0.01)  # m_hat = 0.5, v_hat = 0.25
    assert abs(p - hand) < 1e-10
    return f"exact clip to [-5, 5], accumulation equal for n in (2, 5, 20), AdamW scalar step {p:.15f}"


@criterion(7, "CER oracle")
def test_cer_oracle():
    rng = np.random.default_rng(0)
    alphabet = np.array(list("abcdef"))
    for _ in range(1000):
        ref = "".join(rng.choice(alphabet, size=rng.integers(1, 21)))
        hyp = "".join(rng.choice(alphabet, size=rng.integers(0, 21)))
        assert cer(hyp, ref).errors == dp_distance(ref, hyp), (ref, hyp)
    assert cer("abcd", "abcd").rate == 0.0
    assert cer("abxd", "abcd").rate == 0.25
    assert cer("", "ab").rate == 1.0
    micro = CerReport([UtteranceResult("a", "x", "", "", EditCounts(1, 0, 0, 10)),
                       UtteranceResult("b", "x", "", "", EditCounts(0, 0, 0, 30))]).overall
    assert micro == 0.025
    return "1000 random pairs match the DP oracle; hand cases 0.0 / 0.25 / 1.0 / 0.025 exact"


@criterion(9, "sweep harness")
def test_sweep_tables(tmp_path):
    cfg_path = tiny_run_config().dump(tmp_path / "tiny.yaml")
    expected_heads = {
        "projector": ["Projector", "Frame Rate", "Pretrained", "Finetuned"],
        "rate": ["Projector", "25Hz", "12.5Hz", "6.25Hz", "3.125Hz"],
        "stages": ["Stage", "Projector", "dialect", "standard", "Overall"],
    }
    expected_rows = {"projector": 4, "rate": 3, "stages": 8}
    for kind, head in expected_heads.items():
        out = tmp_path / kind
        assert cli_main(["sweep", kind, "--config", str(cfg_path), "--out", str(out)]) == 0
        rows = json.loads((out / "table.json").read_text())["rows"]
        assert rows[0] == head, kind
        assert len(rows) - 1 == expected_rows[kind], kind
        first_value = 2 if kind != "rate" else 1
        for r in rows[1:]:
            assert len(r) == len(head)
            for c in r[first_value:]:
                assert 0.0 <= float(c) <= 100.0 * 10  # CER can exceed 100% with insertions
    return "projector, rate and stages tables with all rows, columns and cells populated"


@pytest.mark.slow
@criterion(8, "end-to-end toy benchmark")
def test_end_to_end(tmp_path):
    cfg = RunConfig()
    runs = []
    for name in ("run1", "run2"):
        pipeline._CACHE.clear()  # a rerun must redo the LLM pretraining, not reuse it
        t0 = time.perf_counter()
        summary, reports = pipeline.train(cfg, tmp_path / name)
        runs.append((summary, time.perf_counter() - t0))
    (s1, t1), (s2, t2) = runs
    cers = [s["cer"] for s in s1["stages"]]
    final, first = cers[-1], cers[0]
    _emit("  per-stage held-out CER: " + ", ".join(f"stage {i} {100 * c:.2f}%" for i, c in enumerate(cers, 1)))
    assert len(cers) == 4
    assert final < 0.05, f"final CER {final:.4f}"
    assert final <= first, f"final {final:.4f} > stage-1 {first:.4f}"
    assert max(t1, t2) < 30 * 60, f"{max(t1, t2):.0f}s"
    assert [s["cer"] for s in s2["stages"]] == cers, "rerun CER differs"
    assert [s["cer_by_dialect"] for s in s2["stages"]] == [s["cer_by_dialect"] for s in s1["stages"]]
    return (f"held-out CER {100 * final:.2f}% (stage 1 {100 * first:.2f}%), "
            f"{t1 / 60:.1f} and {t2 / 60:.1f} min, reruns identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
