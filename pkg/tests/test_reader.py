"""Reader tests: ablation lattice validation, attention against scalar
oracles, hop wiring, padding invariance, and the degenerate-configuration
equivalence with an independently coded reference."""

import math

import numpy as np
import pytest

from dgreader.autodiff import Tape, backward, bigru
from dgreader.errors import ConfigError, ContractViolation, DimensionError
from dgreader.reader import (
    ABLATION_PRESETS,
    ReaderConfig,
    ReaderParams,
    cross_attend,
    encode_full,
    energy,
    gate,
    hop,
    initial_read,
    qe_comm_features,
)

from ga_reference import ga_encode, random_embeddings, suffix_mask


def scalar_cross_attend(e, doc, qry, doc_mask, qry_mask):
    """Plain-Python double-loop oracle for one sample's cross attention."""
    n, m = e.shape
    r = doc.shape[1]
    doc_ctx = np.zeros((n, r))
    for i in range(n):
        exp = [math.exp(e[i, j] - max(e[i, k] for k in range(m) if qry_mask[k])) if qry_mask[j] else 0.0 for j in range(m)]
        z = sum(exp)
        for j in range(m):
            for k in range(r):
                doc_ctx[i, k] += (exp[j] / z) * qry[j, k]
    qry_ctx = np.zeros((m, r))
    for j in range(m):
        exp = [math.exp(e[i, j] - max(e[k, j] for k in range(n) if doc_mask[k])) if doc_mask[i] else 0.0 for i in range(n)]
        z = sum(exp)
        for i in range(n):
            for k in range(r):
                qry_ctx[j, k] += (exp[i] / z) * doc[i, k]
    return doc_ctx, qry_ctx


def tiny_setup(rng, hops=2, hidden=8, dim=5, qe=True, **flags):
    cfg = ReaderConfig(hops=hops, hidden=hidden, qe_comm=qe, **flags).validate()
    params = ReaderParams.create(rng, cfg, dim)
    return cfg, params


class TestReaderConfig:
    def test_all_presets_are_valid(self):
        for name in ABLATION_PRESETS:
            ReaderConfig.from_preset(name)

    def test_query_gating_without_dependent_query_rejected(self):
        with pytest.raises(ConfigError, match="dependent_query"):
            ReaderConfig(query_gating=True, dependent_query=False).validate()

    def test_ga_preset_turns_everything_off(self):
        cfg = ReaderConfig.from_preset("ga-reader")
        assert not (cfg.query_gating or cfg.dependent_query or cfg.carry_query_state)

    def test_bad_hops_and_hidden_rejected(self):
        with pytest.raises(ConfigError):
            ReaderConfig(hops=0).validate()
        with pytest.raises(ConfigError):
            ReaderConfig(hidden=7).validate()

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            ReaderConfig.from_preset("nope")

    def test_parameter_ids_are_unique_and_unshared(self):
        rng = np.random.default_rng(0)
        _, params = tiny_setup(rng)
        ids = [p.id for p in params.parameters()]
        assert len(ids) == len(set(ids))
        # three readings per side, none sharing arrays
        buffers = {id(p.data) for p in params.parameters()}
        assert len(buffers) == len(ids)

    def test_qe_comm_widens_final_document_reader_only(self):
        rng = np.random.default_rng(1)
        cfg, params = tiny_setup(rng, hops=2, hidden=8, dim=5, qe=True)
        assert params.doc_readers[0].fwd.input_size == 5
        assert params.doc_readers[1].fwd.input_size == 8
        assert params.doc_readers[2].fwd.input_size == 9


class TestEnergyAndGate:
    def test_energy_is_pairwise_dot(self):
        rng = np.random.default_rng(2)
        doc = rng.normal(size=(1, 4, 3))
        qry = rng.normal(size=(1, 5, 3))
        tape = Tape()
        e = energy(tape.constant(doc), tape.constant(qry))
        np.testing.assert_allclose(e.data[0], doc[0] @ qry[0].T, atol=1e-14)

    def test_energy_width_mismatch_rejected(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            energy(tape.constant(np.zeros((1, 4, 3))), tape.constant(np.zeros((1, 5, 2))))

    def test_gate_is_elementwise_product(self):
        tape = Tape()
        a = tape.constant([[1.0, 2.0], [3.0, 4.0]])
        b = tape.constant([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(gate(a, b).data, [[5.0, 12.0], [21.0, 32.0]])

    def test_gate_shape_mismatch_rejected(self):
        tape = Tape()
        with pytest.raises(DimensionError):
            gate(tape.constant(np.zeros((2, 3))), tape.constant(np.zeros((3, 2))))


class TestCrossAttend:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_double_loop_oracle(self, seed):
        rng = np.random.default_rng(300 + seed)
        n, m, r = 5, 4, 3
        doc = rng.normal(size=(1, n, r))
        qry = rng.normal(size=(1, m, r))
        dmask = np.array([[1.0, 1.0, 1.0, 1.0, 0.0]])
        qmask = np.array([[1.0, 1.0, 1.0, 0.0]])
        tape = Tape()
        d_t, q_t = tape.constant(doc), tape.constant(qry)
        e = energy(d_t, q_t)
        doc_ctx, qry_ctx, att_doc, att_qry = cross_attend(e, d_t, q_t, dmask, qmask)
        exp_doc, exp_qry = scalar_cross_attend(e.data[0], doc[0], qry[0], dmask[0], qmask[0])
        np.testing.assert_allclose(doc_ctx.data[0], exp_doc, atol=1e-12)
        np.testing.assert_allclose(qry_ctx.data[0][qmask[0] == 1.0], exp_qry[qmask[0] == 1.0], atol=1e-12)

    def test_attention_rows_sum_to_one_and_mask_out(self):
        rng = np.random.default_rng(4)
        doc = rng.normal(size=(2, 6, 4))
        qry = rng.normal(size=(2, 5, 4))
        dmask = suffix_mask(rng, 2, 6)
        qmask = suffix_mask(rng, 2, 5)
        tape = Tape()
        d_t, q_t = tape.constant(doc), tape.constant(qry)
        e = energy(d_t, q_t)
        _, _, att_doc, att_qry = cross_attend(e, d_t, q_t, dmask, qmask)
        np.testing.assert_allclose(att_doc.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(att_qry.sum(-1), 1.0, atol=1e-12)
        for b in range(2):
            assert (att_doc[b][:, qmask[b] == 0.0] == 0.0).all()
            assert (att_qry[b][:, dmask[b] == 0.0] == 0.0).all()


class TestQeFeatures:
    def test_marks_query_tokens_and_skips_placeholder(self):
        doc = ["the", "cat", "@placeholder", "sat", "cat"]
        qry = ["where", "did", "the", "@placeholder", "cat", "go"]
        np.testing.assert_array_equal(
            qe_comm_features(doc, qry), [1.0, 1.0, 0.0, 0.0, 1.0]
        )

    def test_empty_overlap(self):
        np.testing.assert_array_equal(qe_comm_features(["a", "b"], ["c", "@placeholder"]), [0.0, 0.0])


class TestHopWiring:
    def setup_case(self, seed, **flags):
        rng = np.random.default_rng(seed)
        cfg, params = tiny_setup(rng, qe=False, **flags)
        doc, qry = random_embeddings(rng, 1, 6, 4, 5)
        dmask = np.ones((1, 6))
        qmask = np.ones((1, 4))
        return rng, cfg, params, doc, qry, dmask, qmask

    def test_full_flags_hop_equals_manual_composition(self):
        _, cfg, params, doc, qry, dmask, qmask = self.setup_case(10)
        tape = Tape()
        d_emb, q_emb = tape.constant(doc), tape.constant(qry)
        state = initial_read(d_emb, q_emb, params, dmask, qmask)
        nxt = hop(state, cfg, params, q_emb, dmask, qmask)

        # manual straight-line recomputation
        ref = Tape()
        d0, _ = bigru(ref.constant(doc), None, None, params.doc_readers[0], dmask)
        q0, qf = bigru(ref.constant(qry), None, None, params.qry_readers[0], qmask)
        e = ref.matmul(d0, ref.transpose_last2(q0))
        a_d = ref.masked_softmax(e, qmask[:, None, :])
        a_q = ref.masked_softmax(ref.transpose_last2(e), dmask[:, None, :])
        u = ref.mul(d0, ref.matmul(a_d, q0))
        v = ref.mul(q0, ref.matmul(a_q, d0))
        d1, _ = bigru(u, None, None, params.doc_readers[1], dmask)
        q1, _ = bigru(v, qf[0], qf[1], params.qry_readers[1], qmask)
        np.testing.assert_allclose(nxt.doc_enc.data, d1.data, atol=1e-13)
        np.testing.assert_allclose(nxt.qry_enc.data, q1.data, atol=1e-13)

    def test_flag_routing_changes_query_side_only(self):
        # within a single round the flags steer the query reading's input
        # and initial state; the document reading is unaffected
        rng = np.random.default_rng(11)
        full_cfg = ReaderConfig(hops=2, hidden=8, qe_comm=False).validate()
        params = ReaderParams.create(np.random.default_rng(50), full_cfg, 5)
        doc, qry = random_embeddings(rng, 1, 6, 4, 5)
        dmask, qmask = np.ones((1, 6)), np.ones((1, 4))
        tape = Tape()
        d_emb, q_emb = tape.constant(doc), tape.constant(qry)
        state = initial_read(d_emb, q_emb, params, dmask, qmask)
        full = hop(state, full_cfg, params, q_emb, dmask, qmask)
        for flags in (
            dict(query_gating=False, dependent_query=True, carry_query_state=True),
            dict(query_gating=True, dependent_query=True, carry_query_state=False),
        ):
            cfg = ReaderConfig(hops=2, hidden=8, qe_comm=False, **flags).validate()
            ablated = hop(state, cfg, params, q_emb, dmask, qmask)
            assert not np.allclose(ablated.qry_enc.data, full.qry_enc.data)
            np.testing.assert_allclose(ablated.doc_enc.data, full.doc_enc.data, atol=1e-13)

    def test_qe_features_on_non_final_round_rejected(self):
        rng, cfg, params, doc, qry, dmask, qmask = self.setup_case(12)
        cfg_qe = ReaderConfig(hops=2, hidden=8, qe_comm=True).validate()
        params_qe = ReaderParams.create(np.random.default_rng(12), cfg_qe, 5)
        tape = Tape()
        state = initial_read(tape.constant(doc), tape.constant(qry), params_qe, dmask, qmask)
        with pytest.raises(ContractViolation, match="round"):
            hop(state, cfg_qe, params_qe, tape.constant(qry), dmask, qmask,
                qe_features=np.zeros((1, 6)))


class TestEncodeFull:
    def test_trace_has_one_energy_matrix_per_hop(self):
        rng = np.random.default_rng(20)
        for hops in (1, 2, 3):
            cfg, params = tiny_setup(rng, hops=hops, qe=False)
            doc, qry = random_embeddings(rng, 2, 5, 4, 5)
            tape = Tape()
            _, _, trace = encode_full(tape.constant(doc), tape.constant(qry), cfg, params)
            assert len(trace.energies) == hops
            assert len(trace.doc_attention) == hops
            assert trace.energies[0].shape == (2, 5, 4)

    def test_single_sample_rank_two_inputs(self):
        rng = np.random.default_rng(21)
        cfg, params = tiny_setup(rng, qe=False)
        tape = Tape()
        doc_enc, qry_enc, _ = encode_full(
            tape.constant(rng.normal(size=(5, 5))), tape.constant(rng.normal(size=(3, 5))),
            cfg, params,
        )
        assert doc_enc.data.shape == (5, 8)
        assert qry_enc.data.shape == (3, 8)

    def test_qe_mismatch_rejected(self):
        rng = np.random.default_rng(22)
        cfg, params = tiny_setup(rng, qe=True)
        doc, qry = random_embeddings(rng, 1, 5, 3, 5)
        tape = Tape()
        with pytest.raises(ContractViolation, match="qe"):
            encode_full(tape.constant(doc), tape.constant(qry), cfg, params)

    @pytest.mark.parametrize("preset", sorted(ABLATION_PRESETS))
    def test_every_preset_runs_and_differs_where_expected(self, preset):
        rng = np.random.default_rng(23)
        cfg = ReaderConfig.from_preset(preset, hops=2, hidden=8, qe_comm=False)
        params = ReaderParams.create(np.random.default_rng(99), cfg, 5)
        doc, qry = random_embeddings(rng, 1, 6, 4, 5)
        tape = Tape()
        doc_enc, qry_enc, _ = encode_full(tape.constant(doc), tape.constant(qry), cfg, params)
        assert np.isfinite(doc_enc.data).all() and np.isfinite(qry_enc.data).all()

    def test_flags_off_matches_independent_reference(self):
        rng = np.random.default_rng(24)
        cfg = ReaderConfig.from_preset("ga-reader", hops=2, hidden=8, qe_comm=True)
        params = ReaderParams.create(np.random.default_rng(7), cfg, 5)
        doc, qry = random_embeddings(rng, 2, 6, 4, 5)
        dmask = suffix_mask(rng, 2, 6)
        qmask = suffix_mask(rng, 2, 4)
        qe = (rng.random((2, 6)) > 0.5).astype(float)

        tape = Tape()
        got_d, got_q, _ = encode_full(
            tape.constant(doc), tape.constant(qry), cfg, params, dmask, qmask, qe
        )
        ref = Tape()
        exp_d, exp_q = ga_encode(
            ref, ref.constant(doc), ref.constant(qry), params, 2, dmask, qmask, qe
        )
        np.testing.assert_allclose(got_d.data, exp_d.data, atol=1e-12)
        np.testing.assert_allclose(got_q.data, exp_q.data, atol=1e-12)

    def test_padding_does_not_change_real_token_encodings(self):
        rng = np.random.default_rng(25)
        cfg, params = tiny_setup(rng, qe=False)
        doc, qry = random_embeddings(rng, 1, 5, 3, 5)

        tape = Tape()
        short_d, short_q, _ = encode_full(tape.constant(doc), tape.constant(qry), cfg, params)

        pad_doc = np.concatenate([doc, rng.normal(size=(1, 4, 5))], axis=1)
        pad_qry = np.concatenate([qry, rng.normal(size=(1, 2, 5))], axis=1)
        dmask = np.array([[1.0] * 5 + [0.0] * 4])
        qmask = np.array([[1.0] * 3 + [0.0] * 2])
        long_d, long_q, _ = encode_full(
            tape.constant(pad_doc), tape.constant(pad_qry), cfg, params, dmask, qmask
        )
        np.testing.assert_array_equal(long_d.data[0, :5], short_d.data[0])
        np.testing.assert_array_equal(long_q.data[0, :3], short_q.data[0])

    def test_gradients_flow_to_every_reader_parameter(self):
        rng = np.random.default_rng(26)
        cfg, params = tiny_setup(rng, qe=False)
        doc, qry = random_embeddings(rng, 1, 5, 3, 5)
        tape = Tape()
        doc_enc, qry_enc, _ = encode_full(tape.constant(doc), tape.constant(qry), cfg, params)
        loss = tape.sum_all(tape.mul(doc_enc, doc_enc)) + tape.sum_all(
            tape.mul(qry_enc, qry_enc)
        )
        grads = backward(tape, loss)
        for p in params.parameters():
            if p.id.endswith("bias"):
                continue
            assert np.abs(grads[p.id]).max() > 0.0, p.id
