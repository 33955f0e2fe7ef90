"""Standard MIDI File (format 0/1) reader producing onset tracks.

Only note-on events with non-zero velocity are kept. Everything else is
decoded just far enough to validate the byte stream and to build the tempo
map.
"""

from __future__ import annotations

import logging
import struct
from bisect import bisect_right
from dataclasses import dataclass

from .events import DEFAULT_PITCH_COUNT, MIDI_OFFSET, EventTrack, NoteEvent

logger = logging.getLogger(__name__)

DEFAULT_TEMPO_US = 500_000  # 120 BPM
LOWEST_MIDI = MIDI_OFFSET
HIGHEST_MIDI = MIDI_OFFSET + DEFAULT_PITCH_COUNT - 1
TAIL_S = 1.0

# data bytes following each channel-voice status nibble
_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


class SMFParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.reason = message
        self.offset = offset


@dataclass
class SMFReadResult:
    track: EventTrack
    dropped: int  # note-ons outside the supported pitch range
    ticks_per_quarter: int | None


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int):
        self.data = data
        self.pos = pos
        self.end = end

    def byte(self) -> int:
        if self.pos >= self.end:
            raise SMFParseError("unexpected end of track data", self.pos)
        b = self.data[self.pos]
        self.pos += 1
        return b

    def skip(self, n: int):
        if self.pos + n > self.end:
            raise SMFParseError(f"truncated event payload of {n} bytes", self.pos)
        self.pos += n

    def take(self, n: int) -> bytes:
        start = self.pos
        self.skip(n)
        return self.data[start:self.pos]

    def vlq(self) -> int:
        start = self.pos
        value = 0
        for _ in range(4):
            if self.pos >= self.end:
                raise SMFParseError("truncated variable-length quantity", start)
            b = self.data[self.pos]
            self.pos += 1
            value = (value << 7) | (b & 0x7F)
            if not b & 0x80:
                return value
        raise SMFParseError("variable-length quantity longer than 4 bytes", start)


def _parse_track(data: bytes, start: int, end: int, notes: list, tempos: list):
    r = _Reader(data, start, end)
    tick = 0
    running = None
    while r.pos < end:
        tick += r.vlq()
        status_pos = r.pos
        status = r.byte()
        if status == 0xFF:
            running = None
            kind = r.byte()
            length = r.vlq()
            payload = r.take(length)
            if kind == 0x51:
                if length != 3:
                    raise SMFParseError("tempo meta-event must carry 3 bytes", status_pos)
                tempos.append((tick, int.from_bytes(payload, "big")))
            elif kind == 0x2F:
                return
            continue
        if status in (0xF0, 0xF7):
            running = None
            r.skip(r.vlq())
            continue
        if status >= 0xF0:
            raise SMFParseError(f"unsupported system message 0x{status:02X} in file", status_pos)
        if status & 0x80:
            running = status
            first = r.byte()
        else:
            if running is None:
                raise SMFParseError("running status used before any channel status", status_pos)
            first = status
            status = running
        if first & 0x80:
            raise SMFParseError("data byte has high bit set", r.pos - 1)
        nibble = status >> 4
        second = 0
        if _DATA_LEN[nibble] == 2:
            second = r.byte()
            if second & 0x80:
                raise SMFParseError("data byte has high bit set", r.pos - 1)
        if nibble == 0x9 and second > 0:
            notes.append((tick, first, second))
    # a track without End-of-Track is tolerated


class _TempoMap:
    def __init__(self, tempos: list[tuple[int, int]], division: int):
        self.division = division
        # keep the last tempo written at any given tick
        by_tick: dict[int, int] = {}
        for tick, us in sorted(tempos, key=lambda x: x[0]):
            by_tick[tick] = us
        if 0 not in by_tick:
            by_tick[0] = DEFAULT_TEMPO_US
        self.ticks = sorted(by_tick)
        self.tempo = [by_tick[t] for t in self.ticks]
        self.seconds = [0.0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.seconds.append(self.seconds[-1] + span * self.tempo[i - 1] / 1e6 / division)

    def to_seconds(self, tick: int) -> float:
        i = bisect_right(self.ticks, tick) - 1
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempo[i] / 1e6 / self.division


def read_smf(data: bytes, pitch_count: int = DEFAULT_PITCH_COUNT) -> SMFReadResult:
    """Decode an SMF byte string into an onset track plus parse statistics."""
    data = bytes(data)
    if len(data) < 8 or data[:4] != b"MThd":
        raise SMFParseError("missing MThd header chunk", 0)
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen != 6:
        raise SMFParseError(f"MThd length must be 6, found {hlen}", 4)
    if len(data) < 14:
        raise SMFParseError("truncated MThd header", len(data))
    fmt, ntracks, division = struct.unpack(">HHH", data[8:14])
    if fmt == 2:
        raise SMFParseError("SMF format 2 is not supported", 8)
    if fmt not in (0, 1):
        raise SMFParseError(f"unknown SMF format {fmt}", 8)
    if division & 0x8000:
        fps = 256 - (division >> 8)
        per_frame = division & 0xFF
        if fps not in (24, 25, 29, 30) or per_frame == 0:
            raise SMFParseError("invalid SMPTE time division", 12)
        seconds_per_tick = 1.0 / (fps * per_frame)
        ppq = None
    else:
        if division == 0:
            raise SMFParseError("ticks per quarter note must be positive", 12)
        seconds_per_tick = None
        ppq = division

    notes: list[tuple[int, int, int]] = []
    tempos: list[tuple[int, int]] = []
    pos = 8 + hlen
    found = 0
    while pos < len(data) and found < ntracks:
        if pos + 8 > len(data):
            raise SMFParseError("truncated chunk header", pos)
        kind = data[pos:pos + 4]
        (clen,) = struct.unpack(">I", data[pos + 4:pos + 8])
        body = pos + 8
        if body + clen > len(data):
            raise SMFParseError(f"chunk of {clen} bytes runs past end of file", pos + 4)
        if kind == b"MTrk":
            _parse_track(data, body, body + clen, notes, tempos)
            found += 1
        pos = body + clen
    if found < ntracks:
        raise SMFParseError(f"header announces {ntracks} tracks, found {found}", pos)
    if not notes:
        raise SMFParseError("file contains no note-on events", pos)

    if ppq is not None:
        tempo_map = _TempoMap(tempos, ppq)
        to_seconds = tempo_map.to_seconds
    else:
        def to_seconds(tick):
            return tick * seconds_per_tick

    dropped = 0
    seen = set()
    events = []
    last = 0.0
    for tick, key, velocity in notes:
        t = to_seconds(tick)
        last = max(last, t)
        if not LOWEST_MIDI <= key <= HIGHEST_MIDI or key - MIDI_OFFSET >= pitch_count:
            dropped += 1
            continue
        pitch = key - MIDI_OFFSET
        if (t, pitch) in seen:
            continue
        seen.add((t, pitch))
        events.append(NoteEvent(t, pitch, velocity))
    if dropped:
        logger.warning("dropped %d note-on events outside MIDI %d-%d", dropped, LOWEST_MIDI, HIGHEST_MIDI)
    track = EventTrack(tuple(events), last + TAIL_S, pitch_count)
    return SMFReadResult(track, dropped, ppq)


def parse_smf(data: bytes) -> EventTrack:
    return read_smf(data).track
