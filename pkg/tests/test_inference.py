"""What-if demand grid: sweep correctness, record counts, export round trip."""

import numpy as np
import pytest

from demandgrid.datagen import CatalogSpec, discount_grid, generate_catalog
from demandgrid.features import CovariateSchema, FeatureBuilder
from demandgrid.imputation import impute_catalog
from demandgrid.inference import GRID_HEADER, DemandGrid, export_grid, predict_grid, read_grid, sweep
from demandgrid.model import DemandForecaster, ModelConfig, segment_fill


@pytest.fixture(scope="module")
def three_market():
    cat, _ = generate_catalog(CatalogSpec(n_articles=6, n_markets=3, n_weeks=60, seed=4, cold_start_share=0.0))
    schema = CovariateSchema(n_markets=3, e_dim=10, window=12)
    builder = FeatureBuilder(schema, cat, impute_catalog(cat))
    model = DemandForecaster(ModelConfig.for_schema(schema, heads=3, dropout=0.0, seed=1), schema)
    rng = np.random.default_rng(0)
    for p in model.params.values():
        p.data = p.data + rng.normal(0, 0.05, p.shape)
    return builder, model


class TestSweep:
    """Vectorised sweep equals the head evaluated one discount at a time."""

    def test_matches_pointwise(self):
        rng = np.random.default_rng(0)
        q, s, delta = rng.uniform(0, 2, (2, 3, 2)), rng.uniform(0, 1, (2, 3, 2)), rng.uniform(0, 1, (2, 3, 2, 7))
        d = discount_grid()
        out = sweep(q, s, delta, d)
        for k, dk in enumerate(d):
            np.testing.assert_allclose(out[..., k], q + s * (delta * segment_fill(dk)).sum(-1), rtol=1e-14)


class TestPredictGrid:
    """Grid shape, record count, consistency with point forecasts, determinism."""

    def test_record_count(self, three_market):
        builder, model = three_market
        grid = predict_grid(model, builder, origin=40, articles=[0, 1])
        assert grid.shape == (2, 3, 26, 15)
        assert len(grid) == 2340

    def test_matches_point_forecast(self, three_market):
        builder, model = three_market
        grid = predict_grid(model, builder, origin=30, articles=[2, 3], horizon=10)
        batch = builder.batch([2, 3], [30, 30], 10)
        for k in (0, 5, 14):
            batch.discount = np.full_like(batch.discount, grid.discounts[k])
            point = model.predict(batch)  # [B, H, c]
            np.testing.assert_allclose(grid.values[..., k], np.transpose(point, (0, 2, 1)), rtol=1e-12)

    def test_monotone(self, three_market):
        builder, model = three_market
        assert predict_grid(model, builder, origin=40).violations() == 0

    def test_deterministic_and_thread_invariant(self, three_market, monkeypatch):
        import demandgrid.inference as inf

        builder, model = three_market
        ref = predict_grid(model, builder, origin=40)
        monkeypatch.setattr(inf, "CHUNK", 2)
        assert predict_grid(model, builder, origin=40, workers=3).equals(ref)
        assert predict_grid(model, builder, origin=40).equals(ref)

    def test_custom_discounts(self, three_market):
        builder, model = three_market
        grid = predict_grid(model, builder, origin=40, articles=[0], discounts=[0.0, 0.35, 0.7], horizon=4)
        assert grid.shape == (1, 3, 4, 3)

    @pytest.mark.parametrize("bad", [[0.3, 0.2], [0.0, 0.8], [-0.1, 0.2], []])
    def test_bad_discounts(self, three_market, bad):
        builder, model = three_market
        with pytest.raises(ValueError, match="discount axis"):
            predict_grid(model, builder, origin=40, discounts=bad)

    def test_skips_articles_without_history(self, small_builder, small_schema):
        cat = small_builder.catalog
        late = int(np.argmax(cat.launch_week))
        origin = int(cat.launch_week[late]) - 1
        model = DemandForecaster(ModelConfig.for_schema(small_schema, dropout=0.0), small_schema)
        grid = predict_grid(model, small_builder, origin=origin, horizon=3)
        assert int(cat.article_ids[late]) in grid.skipped
        assert int(cat.article_ids[late]) not in grid.article_ids.tolist()
        assert len(grid.article_ids) + len(grid.skipped) == cat.n_articles


class TestExport:
    """CSV export is lossless, byte-deterministic and validated on read."""

    def test_roundtrip(self, three_market, tmp_path):
        builder, model = three_market
        grid = predict_grid(model, builder, origin=40, articles=[0, 1])
        export_grid(grid, tmp_path / "grid.csv")
        back = read_grid(tmp_path / "grid.csv")
        assert back.equals(grid)
        assert back.origin == 40
        lines = (tmp_path / "grid.csv").read_text().splitlines()
        assert lines[0] == GRID_HEADER and len(lines) == 2341
        assert lines[1].startswith("0,0,1,0.0,")

    def test_bytes_deterministic(self, three_market, tmp_path):
        builder, model = three_market
        export_grid(predict_grid(model, builder, origin=40, articles=[0, 1]), tmp_path / "a.csv")
        export_grid(predict_grid(model, builder, origin=40, articles=[0, 1]), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_empty_grid(self, tmp_path):
        grid = DemandGrid(np.zeros((0, 2, 3, 4)), np.zeros(0, dtype=int), np.linspace(0, 0.3, 4), 10, [5])
        export_grid(grid, tmp_path / "g.csv")
        back = read_grid(tmp_path / "g.csv")
        assert len(back) == 0 and back.skipped == [5]

    def test_missing_header(self, tmp_path):
        (tmp_path / "g.csv").write_text("1,0,1,0.0,2.0\n")
        with pytest.raises(ValueError, match="header"):
            read_grid(tmp_path / "g.csv")

    def test_incomplete_grid(self, tmp_path):
        (tmp_path / "g.csv").write_text(GRID_HEADER + "\n1,0,1,0.0,2.0\n1,0,1,0.1,2.5\n1,0,2,0.0,2.1\n")
        with pytest.raises(ValueError, match="full grid"):
            read_grid(tmp_path / "g.csv")

    def test_unwritable(self, tmp_path):
        grid = DemandGrid(np.zeros((1, 1, 1, 1)), np.zeros(1, dtype=int), np.zeros(1))
        with pytest.raises(OSError, match="cannot write grid"):
            export_grid(grid, tmp_path / "missing" / "g.csv")
