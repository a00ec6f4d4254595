"""
Tests for the resteer command line and its exit codes
"""

import json
import os
import shutil
import tempfile
import unittest

from click.testing import CliRunner

from src.cli import cli
from src.selftest import miniature_model
from src.storage import ArtifactStore, load_patch


class TestCli(unittest.TestCase):
    """Subcommands on the miniature model"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        self.out = os.path.join(self.test_dir, "out")
        self.runner = CliRunner()
        inputs = ArtifactStore(self.test_dir)
        self.base = str(inputs.save_checkpoint("base.rstr", miniature_model()))
        self.config = self._write("run.json", json.dumps({
            "seed": 0,
            "schedule": {"T": 20},
            "metrics": {"sample_steps": 5, "probe_timesteps": [5], "memorization_runs": 1, "anchor_images": 2},
        }))
        self.concept = self._write("kiki.json", json.dumps({
            "name": "kiki", "prompt": "kiki", "templates": ["a photo of {}"],
            "renders": {"concept": "kiki", "count": 4, "seed": 1},
        }))

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def _write(self, name, text):
        path = os.path.join(self.test_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return path

    def _invoke(self, *args):
        return self.runner.invoke(cli, ["--out", self.out, *args])

    def _forget(self, *extra):
        return self._invoke("forget", "--model", self.base, "--concept", self.concept, "--steps", "2",
                            "--batch", "2", "--config", self.config, *extra)

    def test_selftest_passes(self):
        """Every built-in check passes on a clean install"""
        result = self._invoke("selftest")
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("checks passed", result.output)

    def test_forget_writes_patch(self):
        """forget saves a patch over the cross-attention scope"""
        result = self._forget("--out-patch", "kiki.rpch", "--save-model", "forgotten.rstr")
        self.assertEqual(result.exit_code, 0, result.output)
        patch = load_patch(os.path.join(self.out, "kiki.rpch"))
        self.assertEqual(patch.metadata["scope"], "ca")
        self.assertTrue(os.path.exists(os.path.join(self.out, "forgotten.rstr")))
        self.assertTrue(os.path.exists(os.path.join(self.out, "forget_log.csv")))

    def test_patch_apply_and_reapply(self):
        """Applying to the base works; applying to the patched model exits 4"""
        self._forget("--out-patch", "kiki.rpch", "--save-model", "forgotten.rstr")
        patch = os.path.join(self.out, "kiki.rpch")
        ok = self._invoke("patch", "apply", "--model", self.base, "--patch", patch, "--out-model", "patched.rstr")
        self.assertEqual(ok.exit_code, 0, ok.output)
        again = self._invoke("patch", "apply", "--model", os.path.join(self.out, "forgotten.rstr"),
                             "--patch", patch, "--out-model", "twice.rstr")
        self.assertEqual(again.exit_code, 4)
        self.assertIn("already applied", again.output)

    def test_patch_info(self):
        """patch info prints the base fingerprint and tensor list"""
        self._forget("--out-patch", "kiki.rpch")
        result = self._invoke("patch", "info", "--patch", os.path.join(self.out, "kiki.rpch"))
        self.assertEqual(result.exit_code, 0, result.output)
        self.assertIn("Base fingerprint", result.output)
        self.assertIn("xattn", result.output)

    def test_patch_diff_matches_forget_patch(self):
        """Diffing base and forgotten checkpoints reproduces the forget patch fingerprints"""
        self._forget("--out-patch", "kiki.rpch", "--save-model", "forgotten.rstr")
        result = self._invoke("patch", "diff", "--base", self.base, "--target",
                              os.path.join(self.out, "forgotten.rstr"), "--out-patch", "diff.rpch")
        self.assertEqual(result.exit_code, 0, result.output)
        made = load_patch(os.path.join(self.out, "kiki.rpch"))
        diffed = load_patch(os.path.join(self.out, "diff.rpch"))
        self.assertEqual(diffed.base_fingerprint, made.base_fingerprint)
        self.assertEqual(diffed.result_fingerprint, made.result_fingerprint)
        self.assertEqual(diffed.metadata["method"], "diff")

    def test_sample_writes_mosaic(self):
        """sample saves a PPM mosaic in the output directory"""
        result = self._invoke("sample", "--model", self.base, "--prompt", "a photo of kiki", "--count", "2",
                              "--steps", "5", "--config", self.config, "--name", "kiki.ppm")
        self.assertEqual(result.exit_code, 0, result.output)
        with open(os.path.join(self.out, "kiki.ppm"), "rb") as fh:
            self.assertTrue(fh.read(2) == b"P6")

    def test_bad_config_exits_3(self):
        """Schema and syntax errors in a run configuration exit 3"""
        unknown = self._write("unknown.json", '{"forget": {"stepz": 3}}')
        result = self._forget("--config", unknown)
        self.assertEqual(result.exit_code, 3)
        self.assertIn("forget.stepz", result.output)
        broken = self._write("broken.json", '{\n  "seed": 1,\n}\n')
        result = self._forget("--config", broken)
        self.assertEqual(result.exit_code, 3)
        self.assertIn("line 3", result.output)

    def test_garbage_checkpoint_exits_5(self):
        """A file that is not a checkpoint exits 5"""
        garbage = os.path.join(self.test_dir, "garbage.rstr")
        with open(garbage, "wb") as fh:
            fh.write(b"not a checkpoint at all")
        result = self._invoke("sample", "--model", garbage, "--prompt", "kiki", "--steps", "5",
                              "--config", self.config)
        self.assertEqual(result.exit_code, 5)

    def test_escaping_output_exits_7(self):
        """Writing outside the output directory exits 7"""
        result = self._forget("--out-patch", "../escape.rpch")
        self.assertEqual(result.exit_code, 7)
        self.assertFalse(os.path.exists(os.path.join(self.test_dir, "escape.rpch")))

    def test_usage_error_exits_2(self):
        """Unknown options are usage errors"""
        result = self._invoke("forget", "--bogus")
        self.assertEqual(result.exit_code, 2)


if __name__ == '__main__':
    unittest.main()
