"""Table formatting, curve files, and best-run selection."""

import csv
import io
import math

import pytest

from deskmt.errors import ConfigError, DataError
from deskmt.sweep import (
    Budget,
    Registry,
    SweepGrid,
    SweepSpec,
    execute_sweep,
)
from deskmt.report import (
    TABLE_HEADER,
    emit_curves,
    emit_table,
    format_loss,
    format_perplexity,
    load_metric_stream,
    run_label,
    select_best,
)

from corpora import write_cipher_corpus
from table_fixture import BEST_ROW, build_fixture_registry


class TestFormatting:
    def test_scientific_above_threshold(self):
        assert format_perplexity(52000.0) == "5.2e+04"
        assert format_perplexity(2.1e6) == "2.1e+06"
        assert format_perplexity(1000.0) == "1.0e+03"

    def test_plain_below_threshold(self):
        assert format_perplexity(10.68055) == "10.6806"
        assert format_perplexity(999.9) == "999.9000"

    def test_loss_four_decimals(self):
        assert format_loss(2.73890123) == "2.7389"

    def test_non_finite(self):
        assert format_perplexity(math.inf) == "inf"
        assert format_loss(math.nan) == "nan"


class TestEmitTable:
    def test_empty_registry_gives_header_only(self):
        csv_text, aligned = emit_table([])
        assert csv_text == TABLE_HEADER + "\n"
        assert aligned.splitlines()[0].split() == TABLE_HEADER.split(",")

    def test_fixture_rows_render_published_style(self, tmp_path):
        registry = build_fixture_registry(tmp_path / "registry.jsonl")
        records = registry.replay()
        csv_text, _ = emit_table(records)
        lines = csv_text.splitlines()
        assert lines[0] == TABLE_HEADER
        assert len(lines) == 1 + len(records)
        first = lines[1].split(",")
        assert first[:4] == ["16", "4", "2", "0.1"]
        assert first[5] == "2.7389"
        assert first[7] == "10.6806"
        assert first[8] == "3.20"
        assert first[9] == "completed"
        big = [l for l in lines if l.startswith("32,4,2,0.5")][0]
        assert "5.2e+04" in big

    def test_csv_round_trip(self, tmp_path):
        registry = build_fixture_registry(tmp_path / "registry.jsonl")
        records = registry.replay()
        csv_text, _ = emit_table(records)
        parsed = list(csv.DictReader(io.StringIO(csv_text)))
        assert len(parsed) == len(records)
        for row, rec in zip(parsed, records):
            assert int(row["model_size"]) == rec.combo["d_model"]
            assert float(row["dropout"]) == rec.combo["dropout"]
            assert float(row["param_count_millions"]) == pytest.approx(
                rec.param_count / 1e6, abs=0.005)
            if rec.final["val_perplexity"] < 1000:
                assert float(row["val_perplexity"]) == pytest.approx(
                    rec.final["val_perplexity"], abs=1e-4)

    def test_emission_is_pure(self, tmp_path):
        registry = build_fixture_registry(tmp_path / "registry.jsonl")
        records = registry.replay()
        assert emit_table(records) == emit_table(records)


@pytest.fixture(scope="module")
def completed_sweep(tmp_path_factory):
    base = tmp_path_factory.mktemp("report_sweep")
    corpus = write_cipher_corpus(base / "toy.tsv", n_pairs=60, vocab=20,
                                 min_len=2, max_len=4, seed=5)
    spec = SweepSpec(
        grid=SweepGrid(d_model=[16], n_heads=[4], n_layers=[1], dropout=[0.1]),
        budget=Budget(epoch_cap=3, wall_clock_cap_minutes=60),
        corpus=str(corpus), seed=2, batch_size=16, learning_rate=1e-3, min_freq=1,
        max_len=16,
    )
    out = base / "sweep"
    records = execute_sweep(spec, out)
    return out, records


class TestEmitCurves:
    def test_three_files_three_rows(self, completed_sweep, tmp_path):
        out, records = completed_sweep
        rec = records[0]
        paths = emit_curves(out / "runs" / rec.run_id / "metrics.jsonl",
                            rec.run_id, tmp_path, rec.combo)
        assert set(paths) == {"accuracy", "loss", "perplexity"}
        for metric, path in paths.items():
            lines = open(path).read().splitlines()
            assert lines[0] == "epoch,train,val"
            assert len(lines) == 1 + 3
            assert run_label(rec.combo) in path

    def test_perplexity_column_is_exp_of_loss(self, completed_sweep, tmp_path):
        out, records = completed_sweep
        rec = records[0]
        paths = emit_curves(out / "runs" / rec.run_id / "metrics.jsonl",
                            rec.run_id, tmp_path, rec.combo)
        loss_rows = list(csv.DictReader(open(paths["loss"])))
        ppl_rows = list(csv.DictReader(open(paths["perplexity"])))
        for lr_, pr in zip(loss_rows, ppl_rows):
            assert float(pr["train"]) == math.exp(float(lr_["train"]))
            assert float(pr["val"]) == math.exp(float(lr_["val"]))

    def test_unknown_run_id(self, completed_sweep, tmp_path):
        out, records = completed_sweep
        with pytest.raises(DataError):
            emit_curves(out / "runs" / records[0].run_id / "metrics.jsonl",
                        "no-such-run", tmp_path, records[0].combo)

    def test_label_format(self):
        assert run_label({"d_model": 128, "n_heads": 4, "n_layers": 4,
                          "dropout": 0.1}) == "d128_h4_l4_p0.1"

    def test_halted_run_gets_exactly_its_epochs(self, tmp_path):
        corpus = write_cipher_corpus(tmp_path / "toy.tsv", n_pairs=40, vocab=15,
                                     min_len=2, max_len=4, seed=6)
        spec = SweepSpec(
            grid=SweepGrid(d_model=[16], n_heads=[4], n_layers=[1], dropout=[0.1]),
            budget=Budget(epoch_cap=30, wall_clock_cap_minutes=60),
            corpus=str(corpus), seed=2, batch_size=16, learning_rate=1e3,
            min_freq=1, max_len=16,
        )
        out = tmp_path / "sweep"
        records = execute_sweep(spec, out)
        rec = records[0]
        assert rec.status == "halted_divergent"
        history = load_metric_stream(out / "runs" / rec.run_id / "metrics.jsonl",
                                     rec.run_id)
        assert len(history) == rec.halt_epoch


class TestSelectBest:
    def test_published_winner_on_fixture(self, tmp_path):
        registry = build_fixture_registry(tmp_path / "registry.jsonl")
        best = select_best(registry.replay())
        assert (best.combo["d_model"], best.combo["n_heads"],
                best.combo["n_layers"], best.combo["dropout"]) == BEST_ROW
        assert best.final["val_perplexity"] == pytest.approx(2.4579)
        assert best.param_count / 1e6 == pytest.approx(26.87, abs=0.005)

    def test_single_run_selects_itself(self, completed_sweep):
        _, records = completed_sweep
        assert select_best(records) is records[0]

    def test_tie_breaks_to_fewer_parameters(self, tmp_path):
        registry = Registry(tmp_path / "r.jsonl")
        for i, (params, ppl) in enumerate([(2_000_000, 5.0), (1_000_000, 5.0)]):
            rid = f"run{i}"
            registry.append("registered", rid, order=i,
                            combo={"d_model": 16, "n_heads": 4, "n_layers": 2,
                                   "dropout": 0.1},
                            seed=0, param_count=params, config={}, epoch_cap=1,
                            data_hash="x")
            registry.append("started", rid)
            registry.append("completed", rid, epochs=1, elapsed_min=1.0,
                            final={"val_perplexity": ppl, "val_loss": math.log(ppl),
                                   "train_loss": 1.0})
        best = select_best(registry.replay())
        assert best.run_id == "run1"

    def test_no_completed_runs(self):
        with pytest.raises(ConfigError):
            select_best([])
