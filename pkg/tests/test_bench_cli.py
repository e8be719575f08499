"""Benchmark rows, sweep derivations, and the command line interface."""

import numpy as np
import pytest

from scattermlp import bench, cli


def _by_mode(records, mode):
    return [r for r in records if r.mode == mode]


def test_csv_header_is_stable():
    assert bench.CSV_HEADER == ("mode,k,E,d_model,d_expert,T,median_ns,p5_ns,"
                                "p95_ns,macs,peak_bytes,tokens_per_s")


def test_record_row_matches_header_width():
    rec = bench.bench_dense_mlp(8, 16, 4, repeats=1, warmup=0)
    assert len(rec.to_csv_row().split(",")) == len(bench.CSV_HEADER.split(","))
    assert rec.median_ns > 0 and rec.tokens_per_s > 0


def test_granularity_sweep_derivations():
    """E = 8k and k * d_expert = d_ff on every routed row; G = d_ff / d_expert."""
    records = bench.sweep_granularity(16, 32, 24, ks=(1, 2, 4), repeats=1,
                                      warmup=0, block_size=8)
    fused = _by_mode(records, "fused")
    assert [r.k for r in fused] == [1, 2, 4]
    for row in fused + _by_mode(records, "baseline"):
        assert row.num_experts == 8 * row.k
        assert row.k * row.d_expert == 32
        assert 32 // row.d_expert == row.k
    dense = _by_mode(records, "dense")
    assert len(dense) == 1 and dense[0].k == 1 and dense[0].num_experts == 1
    assert dense[0].d_expert == 32


def test_full_scale_preset_derivations_without_running_them():
    d_ff, k = cli.PRESETS["paper"]["d_ff"], 4
    assert d_ff // k == 2048 and 8 * k == 32 and d_ff // (d_ff // k) == 4
    heads, ka = cli.PRESETS["paper"]["heads"], 8
    assert heads // ka == 4 and 8 * ka == 64


def test_granularity_fused_macs_match_dense_and_ignore_padding():
    records = bench.sweep_granularity(16, 32, 24, ks=(1, 2, 4), repeats=1,
                                      warmup=0, block_size=128)
    dense_macs = _by_mode(records, "dense")[0].macs
    assert dense_macs == 2 * 24 * 16 * 32
    for row in _by_mode(records, "fused"):
        assert row.macs == dense_macs
    for row in _by_mode(records, "baseline"):
        assert row.macs > dense_macs  # pad rows are paid for


def test_baseline_at_block_one_pays_no_padding():
    records = bench.sweep_granularity(16, 32, 24, ks=(2,), repeats=1,
                                      warmup=0, block_size=1)
    fused, = _by_mode(records, "fused")
    baseline, = _by_mode(records, "baseline")
    assert baseline.macs == fused.macs
    assert baseline.peak_bytes > fused.peak_bytes  # copies remain


def test_sparsity_sweep_meets_dense_at_full_activation():
    records = bench.sweep_sparsity(12, 4, 16, num_experts=8, ks=(1, 2, 8),
                                   repeats=1, warmup=0)
    dense, = _by_mode(records, "dense")
    assert dense.d_expert == 8 * 4
    fused = _by_mode(records, "fused")
    assert [r.macs for r in fused] == [dense.macs * k // 8 for k in (1, 2, 8)]
    assert fused[-1].macs == dense.macs


def test_attention_sweep_derivations():
    records = bench.sweep_attention(12, 2, 4, 16, 8, ks=(1, 2), repeats=1,
                                    warmup=0, block_size=4)
    assert {r.mode for r in records} == {"fused", "baseline"}
    for row in records:
        assert row.num_experts == 8 * row.k
        assert row.d_expert == (4 // row.k) * 2
    for k in (1, 2):
        fused, = [r for r in records if r.mode == "fused" and r.k == k]
        baseline, = [r for r in records if r.mode == "baseline" and r.k == k]
        assert baseline.macs >= fused.macs
        assert baseline.peak_bytes > fused.peak_bytes


def test_non_timing_columns_are_reproducible():
    def strip_timing(rec):
        return (rec.mode, rec.k, rec.num_experts, rec.d_model, rec.d_expert,
                rec.tokens, rec.macs, rec.peak_bytes)

    a = bench.sweep_granularity(16, 32, 24, ks=(1, 2), repeats=1, warmup=0)
    b = bench.sweep_granularity(16, 32, 24, ks=(1, 2), repeats=1, warmup=0)
    assert [strip_timing(r) for r in a] == [strip_timing(r) for r in b]


def test_write_csv(tmp_path):
    records = bench.sweep_sparsity(8, 2, 8, num_experts=4, ks=(1,), repeats=1,
                                   warmup=0)
    path = tmp_path / "rows.csv"
    bench.write_csv(records, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == bench.CSV_HEADER
    assert len(lines) == len(records) + 1
    assert lines[1].startswith("dense,1,1,8,")


def test_time_callable_orders_percentiles():
    median, p5, p95 = bench.time_callable(lambda: None, warmup=2, repeats=30)
    assert p5 <= median <= p95


def test_bench_rejects_unknown_mode():
    with pytest.raises(ValueError):
        bench.bench_smoe_mlp(8, 4, 8, 1, 8, mode="mystery", repeats=1, warmup=0)


def test_granularity_requires_divisible_width():
    with pytest.raises(ValueError):
        bench.sweep_granularity(8, 30, 8, ks=(4,), repeats=1, warmup=0)


# ---------------------------------------------------------------------------
# command line


def test_cli_verify_passes():
    assert cli.main(["verify", "--trials", "8", "--seed", "5"]) == 0


def test_cli_verify_detects_injected_fault(capsys):
    code = cli.main(["verify", "--trials", "6", "--inject-fault"])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL" in out
    # the hook must not leak into later runs
    assert cli.main(["verify", "--trials", "4"]) == 0


def test_cli_granularity_writes_csv(tmp_path, capsys):
    path = tmp_path / "gran.csv"
    code = cli.main([
        "sweep-granularity", "--d-model", "16", "--d-ff", "32", "--tokens",
        "24", "--ks", "1,2", "--repeats", "1", "--warmup", "0",
        "--csv", str(path),
    ])
    assert code == 0
    lines = path.read_text().strip().splitlines()
    assert lines[0] == bench.CSV_HEADER
    assert len(lines) == 1 + 5  # dense + (fused, baseline) per k
    assert "dense" in capsys.readouterr().out


def test_cli_sparsity_runs(capsys):
    code = cli.main([
        "sweep-sparsity", "--d-model", "8", "--d-ff", "32", "--experts", "8",
        "--tokens", "16", "--ks", "1,8", "--repeats", "1", "--warmup", "0",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].replace("  ", " ").split() == bench.CSV_HEADER.split(",")


def test_cli_attention_runs(capsys):
    code = cli.main([
        "bench-attention", "--d-model", "12", "--d-head", "2", "--heads", "4",
        "--tokens", "16", "--seq-len", "8", "--ks", "1,2", "--repeats", "1",
        "--warmup", "0",
    ])
    assert code == 0
    assert "baseline" in capsys.readouterr().out


def test_cli_attention_rejects_bad_seq_len():
    with pytest.raises(SystemExit):
        cli.main(["bench-attention", "--tokens", "10", "--seq-len", "4",
                  "--repeats", "1", "--warmup", "0"])


def test_cli_ledger_reports_ratio(tmp_path, capsys):
    path = tmp_path / "ledger.csv"
    code = cli.main([
        "ledger", "--d-model", "16", "--d-ff", "32", "--k", "2", "--experts",
        "8", "--tokens", "32", "--training", "--csv", str(path),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "forward peak ratio baseline/fused" in out
    assert "backward:" in out
    fused_lines = path.read_text().strip().splitlines()
    assert fused_lines[0] == "buffer,phase,rows,cols,bytes"
    assert (tmp_path / "ledger-baseline.csv").exists()


def test_cli_workers_flag_is_accepted():
    assert cli.main(["verify", "--trials", "4", "--workers", "1"]) == 0


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        cli.main([])
