import numpy as np
import pytest

from dropclass import corpus, model as model_mod, schedule
from dropclass.errors import EmptyDataError, MaskError, ValidationError

FEAT = 8


def tiny_corpus(n_speakers=10, utts=3, frames=12, seed=5):
    spec = corpus.CorpusSpec(n_speakers=n_speakers, utts_per_speaker=utts,
                             frames_per_utt=frames, feat_dim=FEAT, seed=seed)
    return corpus.generate_corpus(spec)


def tiny_model(n_classes, seed=0):
    return model_mod.new_model(FEAT, n_classes, hidden_dim=6, embed_dim=4, seed=seed)


class TestSampleSubset:
    def test_size_sorted_unique_in_range(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            r = schedule.sample_subset(20, 7, gen)
            assert r.size == 13
            assert np.all(np.diff(r) > 0)
            assert r[0] >= 0 and r[-1] < 20

    def test_inclusion_probability_uniform(self):
        # each class kept with probability (M-D)/M = 0.5; Monte-Carlo check
        gen = np.random.default_rng(1)
        m, d, reps = 10, 5, 4000
        counts = np.zeros(m)
        for _ in range(reps):
            counts[schedule.sample_subset(m, d, gen)] += 1
        freq = counts / reps
        assert np.all(np.abs(freq - 0.5) < 0.03)

    def test_bounds_enforced(self):
        gen = np.random.default_rng(2)
        with pytest.raises(ValidationError):
            schedule.sample_subset(10, 0, gen)
        with pytest.raises(ValidationError):
            schedule.sample_subset(10, 10, gen)


class TestMaskedHead:
    def test_updates_only_selected_rows(self):
        m = tiny_model(6)
        before = m.head.w.copy()
        mh = schedule.mask_weights(m.head, [1, 3, 4])
        delta = np.ones_like(mh.w)
        mh.apply_update(delta)
        for row in (1, 3, 4):
            assert np.allclose(m.head.w[row], before[row] + 1)
        for row in (0, 2, 5):
            assert np.array_equal(m.head.w[row], before[row])

    def test_view_tracks_underlying_matrix(self):
        m = tiny_model(5)
        mh = schedule.mask_weights(m.head, [0, 2])
        m.head.w[2] = 7.0
        assert np.all(mh.w[1] == 7.0)

    def test_shape_mismatch_rejected(self):
        m = tiny_model(5)
        mh = schedule.mask_weights(m.head, [0, 2])
        with pytest.raises(MaskError):
            mh.apply_update(np.zeros((3, m.head.embed_dim)))


class TestFilterData:
    def test_labels_are_local_and_dense(self):
        c = tiny_corpus()
        view = schedule.filter_data(c, [2, 5, 7])
        assert view.n_outputs == 3
        assert sorted(set(view.labels.tolist())) == [0, 1, 2]
        for u, lab in zip(view.utterances, view.labels):
            assert u.class_id == [2, 5, 7][lab]

    def test_counts(self):
        c = tiny_corpus(n_speakers=6, utts=4)
        view = schedule.filter_data(c, [0, 3])
        assert len(view) == 8

    def test_empty_intersection_raises(self):
        c = tiny_corpus(n_speakers=4)
        sub = corpus.LabeledCorpus([u for u in c.utterances if u.class_id == 0],
                                   n_classes=c.n_classes, split_tag="train")
        with pytest.raises(EmptyDataError):
            schedule.filter_data(sub, [1, 2])


class TestAverageProbability:
    def test_matches_naive_oracle(self):
        c = tiny_corpus(n_speakers=5, utts=2)
        m = tiny_model(5, seed=3)
        p = schedule.p_average(m, c)
        # naive: embed one at a time, softmax in python, average
        from dropclass import embedder
        total = np.zeros(5)
        for u in c.utterances:
            h, _ = embedder.forward(m.params, u.features)
            z = m.head.w.astype(np.float64) @ np.ravel(h).astype(np.float64)
            e = np.exp(z - z.max())
            total += e / e.sum()
        naive = total / len(c.utterances)
        assert np.allclose(p, naive, atol=1e-9)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_empty_utterances_rejected(self):
        m = tiny_model(4)
        with pytest.raises(EmptyDataError):
            schedule.average_probability(m.params, m.head.w, [])


class TestRankAndDrop:
    def test_drops_lowest_probability(self):
        p = np.array([0.4, 0.05, 0.3, 0.15, 0.1])
        kept, dropped = schedule.rank_and_drop(p, [0, 1, 2, 3, 4], 2)
        assert dropped.tolist() == [1, 4]
        assert kept.tolist() == [0, 2, 3]

    def test_restricted_to_active(self):
        p = np.array([0.0, 0.5, 0.2, 0.3])
        kept, dropped = schedule.rank_and_drop(p, [1, 2, 3], 1)
        assert dropped.tolist() == [2]  # class 0 not active, cannot drop
        assert kept.tolist() == [1, 3]

    def test_tie_drops_lower_id(self):
        p = np.array([0.25, 0.25, 0.25, 0.25])
        kept, dropped = schedule.rank_and_drop(p, [0, 1, 2, 3], 2)
        assert dropped.tolist() == [0, 1]
        assert kept.tolist() == [2, 3]

    def test_bounds(self):
        with pytest.raises(ValidationError):
            schedule.rank_and_drop(np.ones(3) / 3, [0, 1, 2], 3)
        with pytest.raises(ValidationError):
            schedule.rank_and_drop(np.ones(3) / 3, [0, 1, 2], 0)


class TestApplyCombine:
    def test_merged_row_is_mean_and_labels_relabelled(self):
        c = tiny_corpus(n_speakers=6, utts=2)
        w = np.arange(24, dtype=np.float32).reshape(6, 4)
        active = np.array([0, 2, 4])
        dropped = np.array([1, 5])
        view, w_plus = schedule.apply_combine(c, dropped, w, active)
        assert w_plus.shape == (4, 4)
        assert np.allclose(w_plus[:3], w[[0, 2, 4]])
        assert np.allclose(w_plus[3], w[[1, 5]].mean(axis=0))
        assert view.n_outputs == 4
        for u, lab in zip(view.utterances, view.labels):
            if u.class_id in (1, 5):
                assert lab == 3
            else:
                assert [0, 2, 4][lab] == u.class_id
        # class 3 (neither active nor dropped) is excluded entirely
        assert all(u.class_id != 3 for u in view.utterances)

    def test_empty_dropped_rejected(self):
        c = tiny_corpus(n_speakers=4)
        with pytest.raises(ValidationError):
            schedule.apply_combine(c, [], np.zeros((4, 4)), [0, 1])


class TestDropStateRefresh:
    def test_dropclass_resamples_from_all_classes(self):
        c = tiny_corpus(n_speakers=12)
        m = tiny_model(12)
        st = schedule.DropState("dropclass", 12, n_drop=6, gen=np.random.default_rng(3))
        seen = set()
        for _ in range(30):
            st.refresh(m)
            assert st.active.size == 6
            seen |= set(st.active.tolist())
            assert np.array_equal(st.active, m.active)
        # non-permanent: over many refreshes every class reappears
        assert seen == set(range(12))

    def test_drop_random_is_permanent(self):
        m = tiny_model(10)
        st = schedule.DropState("drop_random", 10, n_drop=2, gen=np.random.default_rng(4))
        sets = [set(st.active.tolist())]
        for _ in range(3):
            st.refresh(m)
            cur = set(st.active.tolist())
            assert cur < sets[-1]  # strictly shrinking subset
            sets.append(cur)
        assert st.active.size == 4

    def test_dropadapt_drops_lowest_and_is_permanent(self):
        c = tiny_corpus(n_speakers=8, utts=2)
        m = tiny_model(8, seed=6)
        st = schedule.DropState("dropadapt", 8, n_drop=2)
        enrol = c.utterances[:6]
        p = schedule.average_probability(m.params, m.active_weights(), enrol)
        expect_kept, expect_drop = schedule.rank_and_drop(p, st.active, 2)
        ev = st.refresh(m, enrol)
        assert st.active.tolist() == expect_kept.tolist()
        assert list(ev.dropped) == expect_drop.tolist()
        first = set(st.active.tolist())
        st.refresh(m, enrol)
        assert set(st.active.tolist()) < first

    def test_dropadapt_requires_enrolment(self):
        m = tiny_model(6)
        st = schedule.DropState("dropadapt", 6, n_drop=1)
        with pytest.raises(EmptyDataError):
            st.refresh(m, None)

    def test_combine_appends_merged_row(self):
        c = tiny_corpus(n_speakers=8, utts=2)
        m = tiny_model(8, seed=7)
        st = schedule.DropState("dropadapt_combine", 8, n_drop=2)
        enrol = c.utterances[:8]
        st.refresh(m, enrol)
        assert m.merged_row is not None
        assert m.active_weights().shape == (7, m.head.embed_dim)
        view = st.build_view(c)
        # every utterance still present: merged classes share the last label
        assert len(view) == len(c)
        assert view.n_outputs == 7
        merged_labels = [lab for u, lab in zip(view.utterances, view.labels)
                         if u.class_id in st.merged_members]
        assert all(lab == 6 for lab in merged_labels)

    def test_combine_second_refresh_merges_again(self):
        c = tiny_corpus(n_speakers=8, utts=2)
        m = tiny_model(8, seed=8)
        st = schedule.DropState("dropadapt_combine", 8, n_drop=2)
        enrol = c.utterances[:8]
        st.refresh(m, enrol)
        st.refresh(m, enrol)
        assert len(st.merged_members) == 4
        assert st.active.size == 4
        assert m.active_weights().shape == (5, m.head.embed_dim)

    def test_drop_only_data_keeps_full_head(self):
        c = tiny_corpus(n_speakers=8, utts=2)
        m = tiny_model(8, seed=9)
        st = schedule.DropState("drop_only_data", 8, n_drop=2)
        enrol = c.utterances[:8]
        st.refresh(m, enrol)
        assert st.active.size == 8          # head rows unchanged
        assert m.active_weights().shape == (8, m.head.embed_dim)
        assert st.data_classes.size == 6    # data shrinks
        view = st.build_view(c)
        assert len(view) == 12
        # labels still index the FULL head
        for u, lab in zip(view.utterances, view.labels):
            assert lab == u.class_id

    def test_none_mode_is_a_no_op(self):
        m = tiny_model(5)
        st = schedule.DropState("none", 5)
        ev = st.refresh(m)
        assert ev.dropped == ()
        assert st.active.tolist() == list(range(5))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValidationError):
            schedule.DropState("dropout", 5)


def test_refresh_event_record_format():
    ev = schedule.RefreshEvent("dropclass", 6, (1, 4, 7))
    assert ev.record(25) == "25\tdropclass\t6\t1,4,7"
