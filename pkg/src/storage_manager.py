#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Storage Manager Module
Owns everything a run writes to disk: JSON artifacts, assembly variants and
their checksums.
"""

import hashlib
import json
import logging
import os

logger = logging.getLogger(__name__)


def checksum(text):
    """sha256 hex digest of text as UTF-8"""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dumps(data):
    """the one JSON serializer every artifact goes through"""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


class ArtifactStore:
    def __init__(self, out_dir):
        """
        Initialize artifact store

        Args:
            out_dir: directory artifacts are written under, created if missing
        """
        self.out_dir = os.path.abspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def exists(self, name):
        return os.path.exists(self.path(name))

    def _write_text(self, name, text):
        target = self.path(name)
        os.makedirs(os.path.dirname(target), exist_ok=True)
        # newline="" keeps the bytes identical across platforms
        with open(target, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        logger.debug("wrote %s (%d bytes)", name, len(text))
        return target

    def write_json(self, name, data):
        """
        Write a JSON artifact

        Args:
            name: path relative to out_dir, e.g. "suites/block_3.json"
            data: JSON-serializable object

        Returns:
            absolute path written
        """
        return self._write_text(name, dumps(data))

    def read_json(self, name):
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def write_asm(self, name, text):
        """
        Write an assembly file

        Returns:
            sha256 checksum of the text
        """
        self._write_text(name, text)
        return checksum(text)

    def read_text(self, name):
        with open(self.path(name), "r", encoding="utf-8") as f:
            return f.read()

    def list(self, subdir):
        """sorted file names under a subdirectory, empty when it is missing"""
        directory = self.path(subdir)
        if not os.path.isdir(directory):
            return []
        return sorted(name for name in os.listdir(directory) if not name.startswith("."))

    def get_storage_info(self):
        """
        Get artifact directory statistics

        Returns:
            Dictionary with file count and total size
        """
        count = 0
        total = 0
        for root, _dirs, files in os.walk(self.out_dir):
            for name in files:
                count += 1
                total += os.path.getsize(os.path.join(root, name))
        return {"out_dir": self.out_dir, "file_count": count, "total_size": total}
