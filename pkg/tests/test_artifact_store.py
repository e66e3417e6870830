import json
import os
import sys
import tempfile
import unittest

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from stomsfem.artifact_store import (  # noqa: E402
    ARTIFACT_FORMAT_VERSION,
    fingerprint,
    is_artifact_valid,
    load_artifact,
    require_artifact,
    save_artifact,
)
from stomsfem.exceptions import MissingArtifactError  # noqa: E402


class TestArtifactStore(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.dir = self.directory.name
        self.arrays = {"values": np.arange(12.0).reshape(3, 4), "keys": np.array([[0, 1], [2, 3]])}

    def tearDown(self):
        self.directory.cleanup()

    def test_save_and_load(self):
        """Test that arrays and metadata come back unchanged."""
        path = save_artifact("patch_0_0", self.arrays, "abc", {"patch_id": [0, 0]}, self.dir)
        self.assertTrue(os.path.exists(path))
        arrays, metadata = load_artifact("patch_0_0", "abc", self.dir)
        np.testing.assert_array_equal(arrays["values"], self.arrays["values"])
        np.testing.assert_array_equal(arrays["keys"], self.arrays["keys"])
        self.assertEqual(metadata, {"patch_id": [0, 0]})

    def test_fingerprint_mismatch_is_a_miss(self):
        """Test that an artifact built for other settings is not loaded."""
        save_artifact("patch", self.arrays, "abc", None, self.dir)
        self.assertFalse(is_artifact_valid("patch", "def", self.dir))
        self.assertIsNone(load_artifact("patch", "def", self.dir))

    def test_version_mismatch_is_a_miss(self):
        """Test that an archive written by another format version is not loaded."""
        header = {"version": ARTIFACT_FORMAT_VERSION + 1, "fingerprint": "abc", "metadata": {}}
        np.savez(os.path.join(self.dir, "old.npz"), __header__=np.array(json.dumps(header)), values=np.zeros(2))
        self.assertIsNone(load_artifact("old", "abc", self.dir))

    def test_corrupt_file_is_a_miss(self):
        """Test that unreadable archives are treated as missing."""
        with open(os.path.join(self.dir, "broken.npz"), "wb") as f:
            f.write(b"not an archive")
        self.assertFalse(is_artifact_valid("broken", "abc", self.dir))
        self.assertIsNone(load_artifact("broken", "abc", self.dir))

    def test_require_artifact(self):
        """Test that requiring a missing artifact raises and a present one loads."""
        with self.assertRaises(MissingArtifactError):
            require_artifact("absent", "abc", self.dir)
        save_artifact("present", self.arrays, "abc", None, self.dir)
        arrays, _ = require_artifact("present", "abc", self.dir)
        self.assertIn("values", arrays)

    def test_overwrite_replaces_record(self):
        """Test that saving under the same key replaces the earlier record."""
        save_artifact("patch", self.arrays, "abc", None, self.dir)
        save_artifact("patch", {"values": np.ones(2)}, "def", None, self.dir)
        self.assertIsNone(load_artifact("patch", "abc", self.dir))
        arrays, _ = load_artifact("patch", "def", self.dir)
        np.testing.assert_array_equal(arrays["values"], np.ones(2))
        self.assertEqual(sorted(os.listdir(self.dir)), ["patch.npz"])


def test_fingerprint_is_order_independent():
    """Test that the fingerprint depends on content, not key order."""
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
