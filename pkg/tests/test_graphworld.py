"""Environment: domains, dynamics, expert, graphs, tokens, datasets."""

import numpy as np
import pytest

from worldmix import graphworld as gw
from worldmix import nncore as nc


def _domain(scene="studio", task="fetch", seed=0):
    return gw.generate_domain(seed, scene, task)


def test_generate_domain_deterministic():
    a = gw.generate_domain(3, "studio", "fetch")
    b = gw.generate_domain(3, "studio", "fetch")
    assert a == b
    assert a.domain_id == "studio-fetch"
    assert len(a.by_type("object")) == gw.OBJECTS_PER_DOMAIN


def test_domain_counts_and_ids():
    seen = gw.seen_domain_specs(0)
    assert len(seen) == 12
    ids = {d.domain_id for d in seen}
    assert len(ids) == 12
    assert {d.scene for d in seen} == set(gw.SEEN_SCENES)
    assert {d.task for d in seen} == set(gw.SEEN_TASKS)
    unseen = gw.unseen_domain_specs(0)
    assert len(unseen) == 6
    assert ids.isdisjoint({d.domain_id for d in unseen})
    with pytest.raises(ValueError):
        gw.seen_domain_specs(0, 13)


def test_walk_and_grab_rules():
    d = _domain()
    rng = np.random.default_rng(1)
    ep = gw.sample_episode(d, rng)
    state = ep.init
    room = d.by_type("room")[0]
    res = gw.step(d, state, f"walk({room})")
    assert not res.noop and res.state.agent_room == room and res.state.close == frozenset()

    obj = d.by_type("object")[0]
    # not close yet: grab is a flagged no-op that leaves the state untouched
    res2 = gw.step(d, res.state, f"grab({obj})")
    assert res2.noop
    assert res2.state.to_triples(d) == res.state.to_triples(d)

    res3 = gw.step(d, res.state, f"walk({obj})")
    assert obj in res3.state.close
    mode, holder = res3.state.loc[obj]
    if mode == "container" and not res3.state.is_open[holder]:
        res3 = gw.StepResult(gw.step(d, res3.state, f"open({holder})").state, False)
    res4 = gw.step(d, res3.state, f"grab({obj})")
    assert not res4.noop and res4.state.held == obj and obj not in res4.state.loc


def test_container_and_device_rules():
    d = _domain("studio", "stow", seed=2)
    rng = np.random.default_rng(5)
    st = gw._sample_state(d, rng)
    c = d.by_type("container")[0]
    st.is_open[c] = False
    st = gw.step(d, st, f"walk({c})").state
    assert gw.step(d, st, f"putin({c})").noop  # hand empty
    opened = gw.step(d, st, f"open({c})")
    assert not opened.noop and opened.state.is_open[c]
    assert gw.step(d, opened.state, f"open({c})").noop  # already open

    dev = d.by_type("device")[0]
    st2 = gw.step(d, opened.state, f"walk({dev})").state
    flipped = gw.step(d, st2, f"switch({dev})")
    assert not flipped.noop
    assert flipped.state.powered[dev] != st2.powered.get(dev, False)


def test_parse_errors_are_distinct_from_noops():
    d = _domain()
    rng = np.random.default_rng(0)
    st = gw._sample_state(d, rng)
    with pytest.raises(gw.ActionParseError):
        gw.step(d, st, "walk cup_0")
    with pytest.raises(gw.ActionParseError):
        gw.step(d, st, "fly(cup_0)")
    with pytest.raises(gw.ActionParseError):
        gw.step(d, st, "walk(ghost_7)")
    # while an inapplicable action is a plain flagged no-op
    obj = d.by_type("object")[0]
    assert gw.step(d, st, f"grab({obj})").noop


def test_noop_flag_tracks_state_change_fuzz():
    rng = np.random.default_rng(9)
    domains = gw.seen_domain_specs(0) + gw.unseen_domain_specs(0)
    checked = 0
    for _ in range(125):
        d = domains[int(rng.integers(len(domains)))]
        st = gw._sample_state(d, rng)
        names = [e.name for e in d.entities]
        for _ in range(8):
            act = f"{gw.VERBS[int(rng.integers(len(gw.VERBS)))]}({names[int(rng.integers(len(names)))]})"
            res = gw.step(d, st, act)
            changed = res.state.to_triples(d) != st.to_triples(d)
            assert res.noop == (not changed)
            g = gw.graph_from_state(d, res.state)
            assert np.array_equal(g.A, g.A.T)
            assert np.all(np.diag(g.A) == 0)
            assert np.all((g.R > 0) == ((g.A > 0) | np.eye(g.n, dtype=bool)))
            assert g.V.min() >= 0 and g.V.max() <= 1
            st = res.state
            checked += 1
    assert checked == 1000


def test_expert_solves_every_domain():
    for d in gw.seen_domain_specs(0) + gw.unseen_domain_specs(0):
        for e_idx in range(5):
            rng = gw.episode_rng(0, gw._stable_id(d.domain_id) % 997, e_idx)
            ep = gw.sample_episode(d, rng)
            demo = gw.demonstrate(d, ep)
            assert 1 <= len(demo.steps) <= gw.MAX_STEPS_DEFAULT
            if d.task == "fetch":
                assert len(demo.steps) <= 3


def test_goal_starts_unsatisfied_and_expert_reaches_it():
    d = _domain("flat", "relocate", seed=1)
    rng = np.random.default_rng(33)
    ep = gw.sample_episode(d, rng)
    assert not gw.success(d, ep.init, ep.goal)
    state = ep.init
    for act in gw.script_expert(d, ep):
        res = gw.step(d, state, act)
        assert not res.noop
        state = res.state
    assert gw.success(d, state, ep.goal)
    assert gw.success(d, state, ())  # empty goal always holds


def test_demo_replay_matches_stored_observations():
    d = _domain("workshop", "stow", seed=4)
    rng = np.random.default_rng(77)
    demo = gw.demonstrate(d, gw.sample_episode(d, rng))
    state = gw.state_from_triples(d, demo.steps[0][0])
    for obs, act, nxt in demo.steps:
        assert state.to_triples(d) == obs
        state = gw.step(d, state, act).state
        assert state.to_triples(d) == nxt


def test_state_triple_round_trip():
    rng = np.random.default_rng(6)
    for d in gw.seen_domain_specs(0):
        st = gw._sample_state(d, rng)
        t1 = st.to_triples(d)
        st2 = gw.state_from_triples(d, t1)
        assert st2.to_triples(d) == t1


def test_graph_connected_and_state_bits():
    d = _domain("bungalow", "fetch", seed=5)
    rng = np.random.default_rng(2)
    st = gw._sample_state(d, rng)
    c = d.by_type("container")[0]
    st.is_open[c] = True
    g = gw.graph_from_state(d, st)
    reach = np.linalg.matrix_power(g.A + np.eye(g.n), g.n) > 0
    assert reach.all(), "scene graph must be connected"
    ci = g.labels.index(c)
    base = len(gw.ENTITY_TYPES) + len(gw.KINDS)
    assert g.V[ci, base] == 1.0
    st.is_open[c] = False
    g2 = gw.graph_from_state(d, st)
    assert g2.V[ci, base] == 0.0


def test_relation_weights_configurable():
    d = _domain()
    rng = np.random.default_rng(3)
    st = gw._sample_state(d, rng)
    g = gw.graph_from_state(d, st, relation_weights={"inside": 0.5})
    agent_i = g.labels.index("agent")
    room_i = g.labels.index(st.agent_room)
    assert g.R[agent_i, room_i] == 0.5
    assert g.R[agent_i, agent_i] == 1.0


def test_serialize_round_trip_and_injectivity():
    d = _domain("flat", "stow", seed=7)
    rng = np.random.default_rng(11)
    ep = gw.sample_episode(d, rng)
    triples = ep.init.to_triples(d)
    toks = gw.serialize_io(ep.instruction, triples)
    inst, back = gw.parse_io(toks)
    assert inst == list(ep.instruction)
    assert back == tuple(sorted(triples))
    # perturbing the observation or the instruction changes the stream
    other = gw.step(d, ep.init, f"walk({d.by_type('object')[0]})").state.to_triples(d)
    assert gw.serialize_io(ep.instruction, other) != toks
    assert gw.serialize_io(["fetch", "cup_0"], triples) != toks
    with pytest.raises(gw.SerializationError):
        gw.serialize_io(ep.instruction, triples, max_seq_len=5)


def test_action_tokens_round_trip():
    assert gw.tokenize_action("walk(cup_0)") == ["walk", "cup_0"]
    assert gw.action_string("putin", "box_0") == "putin(box_0)"
    with pytest.raises(gw.ActionParseError):
        gw.tokenize_action("walk()")


def test_vocab_enumeration_matches_catalog():
    v = gw.Vocab()
    # independent recount: specials, verbs, instruction words, relations,
    # states, entity names, minus the one verb/state collision ("open")
    names = 1 + (len(gw.KINDS) - 1)
    expected = (
        len(gw.SPECIAL_TOKENS)
        + len(gw.VERBS)
        + len(gw.INSTRUCTION_WORDS)
        + len(gw.RELATION_TOKENS)
        + len(gw.STATE_TOKENS)
        - 1
        + names
    )
    assert len(v) == expected
    assert len(set(v.tokens)) == len(v.tokens)
    assert set(v.verb_ids).isdisjoint(set(v.entity_ids))


def test_vocab_covers_all_serialized_demos():
    v = gw.Vocab()
    for d in gw.seen_domain_specs(0)[:4]:
        demo = gw.demonstrate(d, gw.sample_episode(d, np.random.default_rng(1)))
        for obs, act, nxt in demo.steps:
            v.encode(gw.serialize_io(demo.instruction, obs))
            v.encode(gw.tokenize_action(act))
            v.encode(gw.serialize_observation(nxt))


def test_instruction_encoder_lookup_and_grads():
    v = gw.Vocab()
    enc = gw.InstructionEncoder(v, 8, np.random.default_rng(0))
    inst = ["fetch", "cup_0"]
    with nc.tape() as t:
        phi = enc.encode(inst)
        loss = nc.sum_all(phi)
    assert phi.data.shape == (2, 8)
    assert np.array_equal(phi.data, enc.table.data[v.encode(inst)])
    nc.backward(t, loss)
    assert enc.table.grad is not None and enc.table.grad.sum() == phi.data.size / 8 * 8
    other = enc.encode(["store", "cup_0", "in", "box_0"]).data
    assert other.shape == (4, 8)


def test_dataset_bytes_deterministic(tmp_path):
    domains = gw.seen_domain_specs(0)[:3]
    demos = gw.gen_demos(domains, seed=5, episodes_per_domain=4)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    gw.write_demos(str(p1), demos)
    gw.write_demos(str(p2), gw.gen_demos(domains, seed=5, episodes_per_domain=4))
    assert p1.read_bytes() == p2.read_bytes()
    back = gw.read_demos(str(p1))
    assert back == demos
    differ = gw.gen_demos(domains, seed=6, episodes_per_domain=4)
    assert differ != demos


def test_train_split_rules():
    domains = gw.seen_domain_specs(0)[:2]
    demos = gw.gen_demos(domains, seed=1, episodes_per_domain=5)
    train, held = gw.train_split(demos, holdout=2)
    assert len(train) == 6 and len(held) == 4
    assert {d.domain_id for d in held} == {d.domain_id for d in demos}
    with pytest.raises(ValueError):
        gw.train_split(demos, holdout=5)
