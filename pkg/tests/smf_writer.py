"""Minimal Standard MIDI File writer used to craft parser fixtures."""

import struct


def vlq(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def tempo_event(us_per_quarter: int) -> bytes:
    return b"\xff\x51\x03" + us_per_quarter.to_bytes(3, "big")


def track_chunk(events, end=True) -> bytes:
    """``events``: iterable of (absolute_tick, raw message bytes), any order."""
    body = b""
    last = 0
    for tick, msg in sorted(events, key=lambda e: e[0]):
        body += vlq(tick - last) + msg
        last = tick
    if end:
        body += vlq(0) + b"\xff\x2f\x00"
    return b"MTrk" + struct.pack(">I", len(body)) + body


def header(fmt=0, ntracks=1, division=480) -> bytes:
    return b"MThd" + struct.pack(">IHHH", 6, fmt, ntracks, division)


def smf(tracks, fmt=0, division=480) -> bytes:
    return header(fmt, len(tracks), division) + b"".join(track_chunk(t) for t in tracks)


def note_on(key, velocity=100, channel=0):
    return bytes([0x90 | channel, key, velocity])


def note_off(key, channel=0):
    return bytes([0x80 | channel, key, 0])


def notes_file(notes, division=480, fmt=0, length_ticks=240):
    """Format-0 file from (tick, key) pairs, each followed by its note-off."""
    events = []
    for tick, key in notes:
        events.append((tick, note_on(key)))
        events.append((tick + length_ticks, note_off(key)))
    return smf([events], fmt=fmt, division=division)
