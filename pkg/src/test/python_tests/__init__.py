"""Tests for the simulator; the flat tool modules are imported from `bundled/tool`."""
import sys

from .sim_test_client.constants import TOOL_ROOT

if str(TOOL_ROOT) not in sys.path:
    sys.path.insert(0, str(TOOL_ROOT))
