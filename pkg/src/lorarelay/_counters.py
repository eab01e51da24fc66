"""Slot-audit counter layout shared by the compiled kernel and the Python engine."""

NO_RELAY = 0
IMMEDIATE = 1
UNCODED = 2
SINGLE_RELAY = 3
COOPERATIVE = 4

LOST = 0
DIRECT = 1
VIA_RELAY = 2

NAMES = (
    "rw_slots",
    "rw_empty",
    "rw_both",
    "rw_relay_only",
    "relay_frames",
    "relay_frames_delivered",
    "relay_frames_lost",
    "decode_recovered",
    "decode_nothing_new",
    "decode_discarded",
    "tw_slots",
    "empty_tw",
    "uncoded_dropped",
    "gw_captures",
    "relay_captures",
    "forward_delivered",
)
INDEX = {name: i for i, name in enumerate(NAMES)}
N_COUNTERS = len(NAMES)

RW_SLOTS = INDEX["rw_slots"]
RW_EMPTY = INDEX["rw_empty"]
RW_BOTH = INDEX["rw_both"]
RW_RELAY_ONLY = INDEX["rw_relay_only"]
RELAY_FRAMES = INDEX["relay_frames"]
RELAY_FRAMES_OK = INDEX["relay_frames_delivered"]
RELAY_FRAMES_LOST = INDEX["relay_frames_lost"]
DECODE_RECOVERED = INDEX["decode_recovered"]
DECODE_NOTHING_NEW = INDEX["decode_nothing_new"]
DECODE_DISCARDED = INDEX["decode_discarded"]
TW_SLOTS = INDEX["tw_slots"]
EMPTY_TW = INDEX["empty_tw"]
UNCODED_DROPPED = INDEX["uncoded_dropped"]
GW_CAPTURES = INDEX["gw_captures"]
RELAY_CAPTURES = INDEX["relay_captures"]
FORWARD_DELIVERED = INDEX["forward_delivered"]
