import pytest

from nibswap.clock import FixedClock

PINNED_CLOCK = 1426167581.566535

FW_SOURCE = """\
  for fw_allowed:* ns_v0->ns_v1 {
    INIT ["last_count"] {$out = 0}
    INIT ["time_created"] {$out = time.time()} 
  };
"""

EDGE_SOURCE = """\
  for edge:* ns_v0->ns_v1 {
    INIT ["weight"] {$out = 1} 
  };
"""

FW_KEY = "10.0.0.1_3456_10.0.0.2_80"
FW_DOC = {"trusted_ip": "10.0.0.1", "trusted_port": 3456,
          "untrusted_ip": "10.0.0.2", "untrusted_port": 80}


@pytest.fixture
def pinned_clock():
    return FixedClock(PINNED_CLOCK)
