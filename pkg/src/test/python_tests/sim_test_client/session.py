"""
CLI session for testing.
"""
import os
import subprocess
import sys

from .constants import PROJECT_ROOT

CLI_TIMEOUT = 600


class CliSession:
    """Runs the simulator CLI in a subprocess, like a user at a shell."""

    def __init__(self, cwd=None, script=None, env=None):
        self.cwd = cwd if cwd else os.getcwd()
        self.script = script if script else (PROJECT_ROOT / "bundled" / "tool" / "coco_cli.py")
        self.env = dict(os.environ)
        self.env.setdefault("COCO_IMPORT_STRATEGY", "fromEnvironment")
        self.env.update(env or {})
        self.results = []

    def __enter__(self):
        return self

    def __exit__(self, typ, value, _tb):
        self.results.clear()

    def run(self, *args, env=None) -> subprocess.CompletedProcess:
        """Runs one CLI command and returns its completed process."""
        result = subprocess.run(
            [sys.executable, str(self.script), *[str(a) for a in args]],
            cwd=self.cwd,
            env={**self.env, **(env or {})},
            capture_output=True,
            text=True,
            timeout=CLI_TIMEOUT,
            check=False,
        )
        self.results.append(result)
        return result
