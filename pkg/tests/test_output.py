"""Tests for report rendering and the replayable header"""

import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from pixelveil.errors import ManifestError
from pixelveil.output import Report, ReportRenderer, format_value, read_report_header


class TestFormatValue(unittest.TestCase):
    """Test cell formatting"""

    def test_scalars(self):
        """Test floats, booleans and None"""
        self.assertEqual(format_value(0.1234567891), "0.123457")
        self.assertEqual(format_value(True), "true")
        self.assertEqual(format_value(False), "false")
        self.assertEqual(format_value(None), "")
        self.assertEqual(format_value(7), "7")

    def test_lists(self):
        """Test sequences are comma-joined"""
        self.assertEqual(format_value([256, 128]), "256,128")
        self.assertEqual(format_value((0.5, True)), "0.5,true")

    def test_non_finite(self):
        """Test nan and inf pass through"""
        self.assertEqual(format_value(float("nan")), "nan")
        self.assertEqual(format_value(float("inf")), "inf")


class TestReportRenderer(unittest.TestCase):
    """Test TSV, JSON and text output"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())
        self.report = Report(
            command="bound",
            config={"eta": [0.999], "reference": False},
            metadata={"records": 3},
            rows=[{"eta": 0.999, "M": 320}, {"eta": 0.99, "M": 320, "m_bound": 4.5}],
            notes=["published M values differ"],
        )

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_columns(self):
        """Test columns follow first appearance across rows"""
        self.assertEqual(self.report.columns, ["eta", "M", "m_bound"])

    def test_tsv(self):
        """Test header lines come before the table"""
        lines = ReportRenderer(self.report).to_tsv().splitlines()
        self.assertEqual(lines[0], "# command: bound")
        self.assertEqual(json.loads(lines[1][len("# config: "):]),
                         {"eta": [0.999], "reference": False})
        self.assertEqual(lines[2], "# records: 3")
        self.assertEqual(lines[3], "# note: published M values differ")
        self.assertEqual(lines[4], "eta\tM\tm_bound")
        self.assertEqual(lines[5], "0.999\t320\t")
        self.assertEqual(lines[6], "0.99\t320\t4.5")

    def test_json(self):
        """Test numpy values serialize"""
        report = Report(command="ssim", rows=[{"mean": np.float64(0.99), "ids": np.arange(2)}])
        data = json.loads(ReportRenderer(report).to_json())
        self.assertEqual(data["command"], "ssim")
        self.assertEqual(data["rows"], [{"mean": 0.99, "ids": [0, 1]}])

    def test_text(self):
        """Test the aligned table carries the title and notes"""
        text = ReportRenderer(self.report).to_text()
        self.assertTrue(text.startswith("pixelveil bound\n"))
        self.assertIn("records: 3", text)
        self.assertIn("m_bound", text)
        self.assertIn("Note: published M values differ", text)

    def test_save_by_suffix(self):
        """Test a .json path gets JSON and anything else the delimited report"""
        renderer = ReportRenderer(self.report)
        renderer.save(self.temp_dir / "r.json")
        renderer.save(self.temp_dir / "r.tsv")
        self.assertEqual(json.loads((self.temp_dir / "r.json").read_text())["command"], "bound")
        self.assertTrue((self.temp_dir / "r.tsv").read_text().startswith("# command: bound"))

    def test_header_round_trip(self):
        """Test both formats give back the command and config"""
        renderer = ReportRenderer(self.report)
        for name in ("r.json", "r.tsv"):
            path = self.temp_dir / name
            renderer.save(path)
            command, config = read_report_header(path)
            self.assertEqual(command, "bound")
            self.assertEqual(config, {"eta": [0.999], "reference": False})

    def test_header_without_command(self):
        """Test a file lacking the command line names the missing field"""
        path = self.temp_dir / "bare.tsv"
        path.write_text("eta\tM\n0.9\t10\n")
        with self.assertRaises(ManifestError) as ctx:
            read_report_header(path)
        self.assertEqual(ctx.exception.field, "command")


if __name__ == "__main__":
    unittest.main()
