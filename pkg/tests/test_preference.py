import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocritic.autodiff import ContractViolation
from mocritic.metrics import ground_contact
from mocritic.motion import CANONICAL_LEN, SkeletonTemplate, forward_kinematics
from mocritic.preference import (
    LABEL_STYLES,
    MODES,
    PERTURB_KINDS,
    SELECTIONS,
    AnnotationError,
    ChoiceQuestion,
    PerturbationSpec,
    PreferencePair,
    SynthStyle,
    consensus_stats,
    expand_question,
    labelled_pool,
    load_pairs,
    load_pool,
    load_questions,
    load_specs,
    make_pairs,
    perturb,
    save_pairs,
    save_pool,
    save_questions,
    synth_motion,
    synth_pool,
)

motion_ids = st.lists(st.text("abcdefgh0123456789", min_size=1, max_size=6), min_size=4, max_size=4, unique=True)


def expected_pairs(motions, selection, mode):
    """Enumerate the ordered pairs one answer implies, by brute force over all pairs."""
    if selection in ("all_good", "all_bad"):
        return set()
    out = set()
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            if mode == "best" and i == selection:
                out.add((motions[i], motions[j]))
            if mode == "worst" and j == selection:
                out.add((motions[i], motions[j]))
    return out


@pytest.mark.parametrize("selection", SELECTIONS)
@pytest.mark.parametrize("mode", MODES)
def test_expansion_exhaustive(selection, mode):
    motions = ("m0", "m1", "m2", "m3")
    pairs = expand_question(ChoiceQuestion("q", "p", motions, selection, mode))
    assert {(p.better, p.worse) for p in pairs} == expected_pairs(motions, selection, mode)
    assert all(p.source == "q" for p in pairs)


@settings(max_examples=100, deadline=None)
@given(motion_ids, st.sampled_from(SELECTIONS), st.sampled_from(MODES))
def test_expansion_property(motions, selection, mode):
    q = ChoiceQuestion("q", "p", tuple(motions), selection, mode)
    pairs = expand_question(q)
    assert len(pairs) in (0, 3)
    assert {(p.better, p.worse) for p in pairs} == expected_pairs(motions, selection, mode)


def test_question_validation():
    with pytest.raises(ContractViolation):
        ChoiceQuestion("q", "p", ("a", "a", "b", "c"), 0)
    with pytest.raises(ContractViolation):
        ChoiceQuestion("q", "p", ("a", "b", "c", "d"), 4)
    with pytest.raises(ContractViolation):
        ChoiceQuestion("q", "p", ("a", "b", "c", "d"), True)
    with pytest.raises(ContractViolation):
        PreferencePair("a", "a")


def test_jsonl_roundtrip_and_line_numbers(tmp_path):
    qs = [ChoiceQuestion(f"q{i}", "p", ("a", "b", "c", "d"), i % 4, "best", "x") for i in range(3)]
    save_questions(qs, tmp_path / "q.jsonl")
    assert load_questions(tmp_path / "q.jsonl") == qs

    pairs = [PreferencePair("a", "b", "q0", 0.5, {"kind": "pop"}), PreferencePair("c", "d")]
    save_pairs(pairs, tmp_path / "p.jsonl")
    back = load_pairs(tmp_path / "p.jsonl")
    assert back == pairs and back[0].spec == {"kind": "pop"}

    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"better": "a", "worse": "b"}) + "\n\n{oops\n")
    with pytest.raises(AnnotationError, match=r"bad\.jsonl:3"):
        load_pairs(bad)
    bad.write_text(json.dumps({"question_id": "q", "motions": ["a", "b", "c", "d"], "selection": 9}) + "\n")
    with pytest.raises(AnnotationError, match=r":1:"):
        load_questions(bad)


def test_spec_file_errors(tmp_path):
    f = tmp_path / "specs.jsonl"
    f.write_text('{"kind": "pop", "scale": 1.5}\n{"kind": "warp", "scale": 1}\n')
    with pytest.raises(AnnotationError, match=":2:"):
        load_specs(f)


# ------------------------------------------------------------ synthesis


def test_synth_motion_is_deterministic_and_grounded():
    a, b = synth_motion(11), synth_motion(11)
    assert a.allclose(b)
    assert a.length == CANONICAL_LEN
    skel = SkeletonTemplate()
    pos = forward_kinematics(a, skel)
    feet = pos[:, list(skel.foot_joints), 1].min(axis=1)
    np.testing.assert_allclose(feet, 0.0, atol=1e-12)
    assert not synth_motion(12).allclose(a)


def test_contact_fraction_lifts_some_frames():
    clip = synth_motion(3, style=SynthStyle(contact_fraction=0.5, lift_height=0.2))
    assert 0.4 < ground_contact(forward_kinematics(clip), SkeletonTemplate()) < 0.8


def test_labelled_pool_cycles_styles():
    pool = labelled_pool(8, seed=1)
    assert [c.label for c in pool.values()] == [i % len(LABEL_STYLES) for i in range(8)]


@pytest.mark.parametrize("kind", PERTURB_KINDS)
def test_perturb_deterministic_and_zero_scale_identity(kind):
    clip = synth_motion(4)
    scale = 0.3
    a = perturb(clip, PerturbationSpec(kind, scale, 7))
    b = perturb(clip, PerturbationSpec(kind, scale, 7))
    assert a.allclose(b)
    assert not a.allclose(clip)
    assert perturb(clip, PerturbationSpec(kind, 0.0, 7)).allclose(clip)


def test_freeze_holds_pose():
    clip = synth_motion(5)
    out = perturb(clip, PerturbationSpec("freeze", 0.5, 1))
    still = np.all(np.diff(out.frames(), axis=0) == 0, axis=1)
    assert still.sum() >= 29


def test_make_pairs_counts_and_provenance():
    pool = synth_pool(5, seed=2)
    specs = [PerturbationSpec("gaussian_jitter", 0.1), PerturbationSpec("pop", 1.0)]
    pairs, made = make_pairs(pool, specs, seed=9)
    assert len(pairs) == 10 and len(made) == 10
    for p in pairs:
        assert p.better in pool and p.worse in made and p.source == p.better
        rebuilt = perturb(pool[p.better], PerturbationSpec.from_json(p.spec))
        assert rebuilt.allclose(made[p.worse])
    pairs2, made2 = make_pairs(pool, specs, seed=9)
    assert pairs2 == pairs and all(made2[k].allclose(made[k]) for k in made)


def test_pool_roundtrip(tmp_path):
    pool = synth_pool(3, seed=0)
    save_pool(pool, tmp_path)
    back = load_pool(tmp_path)
    assert list(back) == sorted(pool)
    assert all(back[k].allclose(pool[k]) for k in pool)


# ------------------------------------------------------------ consensus


def test_consensus_hand_example():
    motions = ("a", "b", "c", "d")
    answers = {"q1": (0, 0, 0), "q2": (1, 1, 2), "q3": (0, 1, 2)}
    qs = [
        ChoiceQuestion(qid, "p", motions, sel, annotator=f"r{k}")
        for qid, sels in answers.items()
        for k, sel in enumerate(sels)
    ]
    stats = consensus_stats(qs)
    assert stats.n_questions == 3
    assert stats.unanimity == {3: 1, 2: 1, 1: 1}
    assert stats.options_per_question == {1: 1, 2: 1, 3: 1}
    assert stats.unanimous_fraction == pytest.approx(1 / 3)
    # r0/r1 agree on q1, q2; r1/r2 on q1 only; r0/r2 on q1 only
    np.testing.assert_allclose(stats.agreement, [[1, 2 / 3, 1 / 3], [2 / 3, 1, 1 / 3], [1 / 3, 1 / 3, 1]])


def test_consensus_rejects_missing_answers():
    motions = ("a", "b", "c", "d")
    qs = [ChoiceQuestion("q1", "p", motions, 0, annotator="r0"),
          ChoiceQuestion("q1", "p", motions, 0, annotator="r1"),
          ChoiceQuestion("q2", "p", motions, 0, annotator="r0")]
    with pytest.raises(ContractViolation):
        consensus_stats(qs)
