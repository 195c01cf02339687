import json

import pytest

from gfkd.results import FIELDS, HEADER, final_rows, format_row, load_rows, read_csv, summarize, write_all, write_csv


def row(**kw):
    base = dict(run_id="r", phase="distill", seed=0, arm="scratch", labeled_fraction=1.0, patch="3", epoch=1,
                split="val", acc=0.5, miou=0.25, dsc_mean=0.4, hd_mean=3.0, params=10, flops=20)
    base.update(kw)
    return base


class TestCsv:
    def test_header_bytes(self, tmp_path):
        path = tmp_path / "m.csv"
        write_csv(str(path), [])
        assert path.read_bytes() == b"run_id,phase,seed,arm,labeled_fraction,patch,epoch,split,acc,miou,dsc_mean,hd_mean,params,flops\n"
        assert HEADER == ",".join(FIELDS)

    def test_nine_significant_digits(self):
        line = format_row(row(miou=1 / 3, acc=2 / 3, hd_mean=43.840620433565945))
        assert ",0.666666667,0.333333333," in line and ",43.8406204," in line

    def test_lf_only_and_deterministic(self, tmp_path):
        rows = [row(epoch=e, miou=e / 7) for e in range(3)]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(str(a), rows)
        write_csv(str(b), rows)
        assert a.read_bytes() == b.read_bytes() and b"\r" not in a.read_bytes()

    def test_duplicate_key_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="duplicate"):
            write_csv(str(tmp_path / "x.csv"), [row(), row(miou=0.9)])

    def test_missing_field_and_comma(self):
        bad = row()
        del bad["flops"]
        with pytest.raises(ValueError):
            format_row(bad)
        with pytest.raises(ValueError):
            format_row(row(arm="a,b"))

    def test_read_back(self, tmp_path):
        path = tmp_path / "m.csv"
        rows = [row(epoch=1), row(epoch=2, split="train")]
        write_csv(str(path), rows)
        assert load_rows(str(path)) == rows
        assert read_csv(str(path))[1]["split"] == "train"

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            write_csv(str(tmp_path / "missing" / "m.csv"), [row()])


class TestSummary:
    def test_final_rows_take_last_val_epoch(self):
        rows = [row(epoch=1, miou=0.1), row(epoch=2, miou=0.2), row(epoch=3, split="train", miou=0.9)]
        assert [r["miou"] for r in final_rows(rows)] == [0.2]

    def test_single_seed_std_zero(self):
        s = summarize([row()])
        assert s["arms"][0]["miou"] == {"mean": 0.25, "std": 0.0}

    def test_paired_comparison(self):
        rows = []
        for seed in range(5):
            rows.append(row(run_id=f"a{seed}", seed=seed, arm="gf", miou=0.5 + seed / 100))
            rows.append(row(run_id=f"b{seed}", seed=seed, arm="scratch", miou=0.4))
        s = summarize(rows)
        cmp_ = s["comparisons"][0]
        assert (cmp_["a"], cmp_["b"], cmp_["n"]) == ("gf", "scratch", 5)
        assert cmp_["p_two_sided"] == 0.0625 and cmp_["p_greater"] == 1 / 32
        assert cmp_["mean_delta"] == pytest.approx(0.12)
        arm = next(a for a in s["arms"] if a["arm"] == "gf")
        assert arm["miou"]["std"] == pytest.approx(0.0158113883, rel=1e-8)

    def test_no_comparison_across_fractions(self):
        rows = [row(run_id="a", arm="x", labeled_fraction=0.2), row(run_id="b", arm="y", labeled_fraction=0.4)]
        assert summarize(rows)["comparisons"] == []

    def test_write_all(self, tmp_path):
        rows = [row(epoch=1), row(epoch=2)]
        doc = write_all(str(tmp_path / "out"), rows)
        assert len(load_rows(str(tmp_path / "out" / "results.csv"))) == 1
        assert json.loads((tmp_path / "out" / "summary.json").read_text()) == json.loads(json.dumps(doc))
