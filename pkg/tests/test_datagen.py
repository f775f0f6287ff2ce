import numpy as np
import pytest

from bayes_lbn.datagen import (
    DataFormatError,
    Dataset,
    ScenarioSpec,
    assign_weights,
    dataset_to_csv,
    error_laws,
    generate_dag,
    initial_edge_probability,
    make_scenario,
    parse_dataset,
    read_dataset,
    sample,
    sample_covariance,
    scenario_from_json,
    scenario_to_json,
    write_dataset,
)
from bayes_lbn.model import Dag, LinearSemModel, chain_model, covariance_from_model


class TestGenerateDag:
    def test_initial_probability(self):
        assert initial_edge_probability(25, 3) == pytest.approx(0.36)
        assert initial_edge_probability(4, 3) == 1.0

    @pytest.mark.parametrize("p,cap", [(10, 2), (25, 3), (40, 8), (6, 1)])
    def test_moral_degree_cap(self, p, cap):
        for seed in range(5):
            assert generate_dag(p, cap, seed).moral_degree() <= cap

    def test_loose_cap_accepts_complete_graph(self):
        g = generate_dag(5, 4, 0)
        assert len(g.edges) == 10

    def test_deterministic(self):
        assert generate_dag(20, 3, 7) == generate_dag(20, 3, 7)


class TestAssignWeights:
    def test_empty(self):
        m = assign_weights(Dag(3), seed=0)
        assert not m.B.any()

    def test_magnitudes_and_signs(self):
        p = 150
        g = Dag(p, [(j, k) for j in range(p) for k in range(j + 1, p)])
        m = assign_weights(g, (0.5, 1.0), seed=3)
        w = m.B[m.B != 0]
        assert w.size == p * (p - 1) // 2
        assert np.all((np.abs(w) >= 0.5) & (np.abs(w) <= 1.0))
        frac = (w > 0).mean()
        assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / w.size)


class TestSample:
    def test_independent_gaussian_variance(self):
        m = LinearSemModel(np.zeros((3, 3)), np.full(3, 2.0))
        x = sample(m, 100_000, seed=1).x
        np.testing.assert_allclose(x.var(axis=0), 2.0, rtol=0.05)

    def test_chain_covariance(self):
        x = sample(chain_model(2, 0.5), 100_000, seed=2).x
        assert np.cov(x.T)[0, 1] == pytest.approx(0.5, rel=0.05)

    @pytest.mark.parametrize("spec", ["gaussian", "subgaussian_mix", "student_t"])
    def test_empirical_covariance_matches_model(self, spec):
        laws = error_laws(spec, 4)
        m = assign_weights(Dag(4, [(0, 1), (1, 2), (0, 3)]), seed=5, error_law=laws)
        x = sample(m, 200_000, seed=6).x
        np.testing.assert_allclose(np.cov(x.T), covariance_from_model(m), atol=0.06 * covariance_from_model(m).max())

    def test_subgaussian_cycle(self):
        kinds = [law.kind for law in error_laws("subgaussian_mix", 6)]
        assert kinds[:3] == kinds[3:]
        assert len(set(kinds)) == 3

    def test_unknown_spec(self):
        with pytest.raises(ValueError):
            error_laws("cauchy", 3)


class TestScenario:
    def test_bit_identical(self):
        spec = ScenarioSpec(p=12, d_M_cap=3, n=50, seed=9)
        m1, d1 = make_scenario(spec)
        m2, d2 = make_scenario(spec)
        assert np.array_equal(m1.B, m2.B)
        assert np.array_equal(d1.x, d2.x)

    def test_data_seed_overrides_only_data(self):
        spec = ScenarioSpec(p=12, d_M_cap=3, n=50, seed=9)
        m1, d1 = make_scenario(spec, data_seed=1)
        m2, d2 = make_scenario(spec, data_seed=2)
        assert np.array_equal(m1.B, m2.B)
        assert not np.array_equal(d1.x, d2.x)

    def test_json_round_trip(self):
        spec = ScenarioSpec(p=5, d_M_cap=2, n=10, error_spec="student_t", seed=3)
        assert scenario_from_json(scenario_to_json(spec)) == spec

    def test_rejects_bad_spec(self):
        with pytest.raises(ValueError):
            ScenarioSpec(p=5, d_M_cap=2, n=10, error_spec="laplace")
        with pytest.raises(ValueError):
            ScenarioSpec.from_dict({"p": 5, "d_M_cap": 2, "n": 10, "colour": 1})


class TestSampleCovariance:
    def test_constant_column(self):
        x = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
        s, n = sample_covariance(x)
        assert n == 5
        assert not s[1].any() and not s[:, 1].any()

    def test_divisor_n(self):
        s, _ = sample_covariance(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(s, [[1.0]])

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(30, 4))
        np.testing.assert_allclose(sample_covariance(x)[0], sample_covariance(x + 7.5)[0], atol=1e-12)

    def test_rejects_single_row(self):
        with pytest.raises(ValueError):
            sample_covariance(np.ones((1, 3)))


class TestCsv:
    def test_round_trip_exact(self, tmp_path, rng):
        d = Dataset(rng.normal(size=(20, 3)))
        path = tmp_path / "d.csv"
        write_dataset(d, path)
        back = read_dataset(path)
        assert back.column_names == ["X1", "X2", "X3"]
        assert np.array_equal(back.x, d.x)

    def test_line_numbered_errors(self):
        with pytest.raises(DataFormatError, match=r"line 3, column 'b'"):
            parse_dataset("a,b\n1,2\n3,oops\n")
        with pytest.raises(DataFormatError, match="line 2"):
            parse_dataset("a,b\n1\n")
        with pytest.raises(DataFormatError, match="non-finite"):
            parse_dataset("a\nnan\n")
        with pytest.raises(DataFormatError):
            parse_dataset("")

    def test_header_preserved(self):
        d = parse_dataset("alpha,beta\n1,2\n3,4\n")
        assert d.column_names == ["alpha", "beta"]
        assert dataset_to_csv(d).splitlines()[0] == "alpha,beta"
