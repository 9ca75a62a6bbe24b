#!/usr/bin/env python3
"""
Tests for RunConfig validation and YAML config files.
"""

import sys
import os
import tempfile
import unittest
from unittest.mock import patch

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.config import RunConfig, default_threads, load_config_file
from utils.errors import ValidationError, VolumeFormatError, VolumeIOError, exit_code_for


class TestRunConfig(unittest.TestCase):

    def test_defaults_are_valid(self):
        config = RunConfig(subcommand="losses").validate()
        self.assertEqual((config.vs_label, config.cochlea_label, config.num_classes), (1, 2, 3))
        self.assertEqual(config.z_max, 15.0)
        self.assertEqual(config.decay, 0.99)

    def test_rejected_settings(self):
        bad = [
            dict(vs_label=3),
            dict(cochlea_label=-1),
            dict(vs_label=2, cochlea_label=2),
            dict(class_label=5),
            dict(num_classes=0),
            dict(decay=1.5),
            dict(z_max=-1.0),
            dict(eps=-1e-5),
            dict(threads=0),
            dict(chunk_voxels=0),
            dict(grad_trials=0),
        ]
        for values in bad:
            with self.subTest(**values):
                with self.assertRaises(ValidationError):
                    RunConfig(**values).validate()

    def test_missing_input(self):
        with self.assertRaises(VolumeIOError) as ctx:
            RunConfig(inputs=["/nonexistent/probs.nii.gz"]).validate()
        self.assertEqual(exit_code_for(ctx.exception), 2)

    def test_output_directory_must_exist(self):
        with tempfile.TemporaryDirectory() as tmp:
            missing = os.path.join(tmp, "missing")
            for field in ("output", "joint_json", "summary_json"):
                with self.subTest(field=field):
                    with self.assertRaises(VolumeIOError) as ctx:
                        RunConfig(**{field: os.path.join(missing, "out")}).validate()
                    self.assertEqual(exit_code_for(ctx.exception), 2)
            with self.assertRaises(VolumeIOError):
                RunConfig(output=tmp).validate()
            RunConfig(output=os.path.join(tmp, "fused.nii.gz")).validate()

    def test_threads_from_environment(self):
        with patch.dict(os.environ, {"LABELFUSION_THREADS": "4"}):
            self.assertEqual(default_threads(), 4)
            self.assertEqual(RunConfig().threads, 4)
        with patch.dict(os.environ, {"LABELFUSION_THREADS": "many"}):
            self.assertEqual(default_threads(), 1)


class TestConfigFile(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text):
        path = os.path.join(self.tmp.name, "run.yaml")
        with open(path, "w") as f:
            f.write(text)
        return path

    def test_dashes_and_underscores(self):
        values = load_config_file(self.write("z-max: 10\nvs_label: 1\nchunk-voxels: 4096\n"))
        self.assertEqual(values, {"z_max": 10, "vs_label": 1, "chunk_voxels": 4096})

    def test_empty_file(self):
        self.assertEqual(load_config_file(self.write("")), {})

    def test_errors(self):
        with self.assertRaises(ValidationError):
            load_config_file(self.write("zmax: 10\n"))
        with self.assertRaises(VolumeFormatError):
            load_config_file(self.write("- 1\n- 2\n"))
        with self.assertRaises(VolumeFormatError):
            load_config_file(self.write("decay: [0.9\n"))
        with self.assertRaises(VolumeIOError):
            load_config_file(os.path.join(self.tmp.name, "absent.yaml"))


if __name__ == '__main__':
    unittest.main()
