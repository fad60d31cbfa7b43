import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from donkeysac.remote import (EPISODE_RESET, BadMagicError, ControlNode, ControlPayload, EpisodePayload, Frame,
                              LatestSlot, LengthOverflowError, NoObservationError, ObservationPayload, ProtocolError,
                              Publisher, TcpServer, TrailingDataError, TruncatedError, car_loop, connect,
                              control_loop, decode_frame, decode_prefix, detect_offtrack, detector_agreement,
                              encode_frame, header_size, monotonic_us, period_us, run_periodic)
from donkeysac.remote.detector import OfftrackDetectorConfig, dark_fraction
from donkeysac.remote.protocol import MAX_PAYLOAD
from remote_scenarios import (StubCar, applied_control_violations, counting_policy, fuzz_decode, session,
                              staleness_run, torn_read_failures)

# ---------------------------------------------------------------- wire format


def test_two_byte_payload_round_trip():
    f = Frame("ctrl", 42, 1_700_000_000_123, b"\x00\xff")
    buf = encode_frame(f)
    assert decode_frame(buf) == f
    assert buf[:2] == b"DK" and buf[2] == 4 and buf[3:7] == b"ctrl"
    assert int.from_bytes(buf[7:15], "little") == 42
    assert int.from_bytes(buf[23:27], "little") == 2


def test_header_size_for_obs_topic():
    assert header_size("obs") == 26
    assert len(encode_frame(Frame("obs", 1, 1, b""))) == 26


def test_truncation_by_one_byte_is_an_error():
    buf = encode_frame(Frame("obs", 3, 9, b"abc"))
    with pytest.raises(TruncatedError):
        decode_frame(buf[:-1])


def test_error_kinds_are_distinct():
    good = encode_frame(Frame("obs", 1, 2, b"xy"))
    with pytest.raises(BadMagicError):
        decode_frame(b"XK" + good[2:])
    with pytest.raises(TruncatedError):
        decode_frame(good[:10])
    huge = bytearray(good)
    huge[-6:-2] = (MAX_PAYLOAD + 1).to_bytes(4, "little")
    with pytest.raises(LengthOverflowError):
        decode_frame(bytes(huge))
    with pytest.raises(TrailingDataError):
        decode_frame(good + b"\x00")
    kinds = {BadMagicError, TruncatedError, LengthOverflowError, TrailingDataError}
    assert len(kinds) == 4 and all(issubclass(k, ProtocolError) for k in kinds)


def test_decode_prefix_reports_consumed_bytes():
    a, b = Frame("obs", 1, 1, b"a"), Frame("ctrl", 2, 2, b"bb")
    buf = encode_frame(a) + encode_frame(b)
    fa, n = decode_prefix(buf)
    fb, m = decode_prefix(buf[n:])
    assert (fa, fb) == (a, b) and n + m == len(buf)


def test_long_topic_rejected_on_encode():
    with pytest.raises(ValueError):
        encode_frame(Frame("t" * 256, 1, 1, b""))


@settings(max_examples=200, deadline=None)
@given(topic=st.text(max_size=20), seq=st.integers(0, 2**64 - 1), ts=st.integers(0, 2**64 - 1),
       payload=st.binary(max_size=300))
def test_round_trip_property(topic, seq, ts, payload):
    if len(topic.encode("utf-8")) >= 256:
        return
    f = Frame(topic, seq, ts, payload)
    assert decode_frame(encode_frame(f)) == f


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=64))
def test_random_bytes_never_crash_the_decoder(buf):
    try:
        decode_frame(buf)
    except ProtocolError:
        pass


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=1, max_size=40), st.integers(0, 39), st.integers(0, 255))
def test_mutated_frames_never_crash_the_decoder(payload, where, value):
    buf = bytearray(encode_frame(Frame("obs", 5, 6, payload)))
    buf[where % len(buf)] = value
    try:
        decode_frame(bytes(buf))
    except ProtocolError:
        pass


def test_fuzz_batch_only_yields_frames_or_protocol_errors():
    ok, rejected = fuzz_decode(20_000, seed=1)
    assert ok + rejected == 20_000 and rejected > 0


def test_payload_codecs():
    img = np.linspace(0, 1, 12).reshape(3, 4)
    obs = ObservationPayload.from_frame(img, 77)
    back = ObservationPayload.decode(obs.encode())
    assert back == obs and np.array_equal(back.image(), np.rint(img * 255).astype(np.uint8))
    with pytest.raises(TruncatedError):
        ObservationPayload.decode(obs.encode()[:-1])
    c = ControlPayload.decode(ControlPayload(0.25, -0.5).encode())
    assert (c.steering, c.throttle) == (0.25, -0.5)
    assert ControlPayload.decode(ControlPayload(3.0, float("nan")).encode()) == ControlPayload(1.0, 0.0)
    assert EpisodePayload.decode(EpisodePayload(EPISODE_RESET, 9).encode()) == EpisodePayload(EPISODE_RESET, 9)
    with pytest.raises(ProtocolError):
        EpisodePayload.decode(b"\x07\x00\x00\x00\x00")


# ---------------------------------------------------------------- latest-wins slot


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(1, 30))))
def test_slot_holds_highest_sequence_delivered(order):
    slot = LatestSlot()
    best = 0
    for seq in order:
        slot.write(Frame("obs", seq, 0, bytes([seq])), seq)
        best = max(best, seq)
        assert slot.read().frame.sequence == best and slot.read().value == best


def test_slot_clear_and_counters():
    slot = LatestSlot()
    assert slot.read() is None
    assert slot.write(Frame("obs", 2, 0, b""), None)
    assert not slot.write(Frame("obs", 1, 0, b""), None)
    assert slot.dropped_out_of_order == 1 and slot.writes == 1
    slot.clear()
    assert slot.read() is None


def test_no_torn_reads_under_concurrency():
    checked, bad = torn_read_failures(n_writes=5_000, readers=3)
    assert checked > 0 and bad == 0


# ---------------------------------------------------------------- schedules


class FakeClock:
    def __init__(self, cost=0.0):
        self.t = 0.0
        self.cost = cost

    def __call__(self):
        return self.t

    def sleep(self, s):
        self.t += s


def test_periodic_runner_hits_the_rate_without_drift():
    clock = FakeClock()
    ticks = []

    def fn(k):
        ticks.append(clock.t)
        clock.t += 0.003  # work per tick

    run_periodic(0.05, fn, lambda: clock.t >= 2.0 - 1e-9, clock=clock, sleep=clock.sleep)
    assert abs(len(ticks) - 40) <= 1
    assert np.allclose(ticks, 0.05 * np.arange(len(ticks)), atol=1e-9)


def test_periodic_runner_skips_missed_deadlines():
    clock = FakeClock()

    def slow(k):
        clock.t += 0.25 if k == 3 else 0.0

    skipped = run_periodic(0.1, slow, lambda: False, clock=clock, sleep=clock.sleep, max_ticks=10)
    assert skipped == 1


def test_period_rounding():
    assert period_us(20) == 50_000 and period_us(10) == 100_000
    with pytest.raises(ValueError):
        period_us(0)


def test_car_publishes_forty_frames_in_two_seconds():
    s = session(latency_ms=0.0)
    s.start_episode(1)
    before = s.car.published
    s.loop.run_until(s.loop.now + 2_000_000)
    assert abs(s.car.published - before - 40) <= 1


def test_three_second_episode_sends_thirty_controls():
    s = session()
    s.run_control(3_000_000, counting_policy())
    assert abs(s.trainer.pub.last_sequence("ctrl") - 30) <= 1


def test_zero_latency_sequences_are_gapless():
    s = session(latency_ms=0.0)
    seen = []
    inner = s.trainer.dispatcher

    def spy(data, at):
        seen.append(decode_frame(data))
        inner(data, at)

    s.uplink.on_receive = spy
    s.run_control(2_000_000, counting_policy())
    obs = [f.sequence for f in seen if f.topic == "obs"]
    assert obs == list(range(1, len(obs) + 1)) and len(obs) >= 40


# ---------------------------------------------------------------- loop contracts


def test_applied_control_is_latest_decoded():
    s = session(latency_ms=20, jitter_ms=15, seed=3, record=True)
    s.run_control(5_000_000, counting_policy())
    assert len(s.car.applied) > 400
    assert applied_control_violations(s) == 0
    assert {q for _, q in s.car.applied} >= set(range(1, 40))


def test_mean_staleness_with_ten_ms_latency():
    _, stats = staleness_run(obs_hz=20, latency_ms=10, jitter_ms=0, ticks=500)
    mean = stats.summary()["staleness_ms_mean"]
    assert 10.0 <= mean <= 60.0 + 1e-6


@settings(max_examples=25, deadline=None)
@given(obs_hz=st.sampled_from([10.0, 20.0, 25.0, 50.0]), latency=st.integers(0, 120), jitter=st.integers(0, 60),
       seed=st.integers(0, 1000))
def test_staleness_never_exceeds_the_bound(obs_hz, latency, jitter, seed):
    s, stats = staleness_run(obs_hz, latency, jitter, ticks=40, seed=seed)
    bound = period_us(obs_hz) + (latency + jitter) * 1000 + s.control_period
    assert max(stats.staleness_us) <= bound
    assert min(stats.staleness_us) >= latency * 1000


def test_no_duplicates_when_frames_are_fresh():
    _, stats = staleness_run(obs_hz=20, latency_ms=20, jitter_ms=10, ticks=10_000, seed=4)
    assert stats.ticks == 10_000 and stats.duplicates == 0


def test_slow_observations_alias():
    _, stats = staleness_run(obs_hz=10, latency_ms=95, jitter_ms=10, ticks=1_000, seed=5)
    assert stats.duplicate_fraction > 0


def test_startup_without_observations_raises():
    s = session(latency_ms=1500)
    with pytest.raises(NoObservationError):
        s.start_episode(1)

    class Silent:
        on_receive = None

        def start(self):
            return self

        def send(self, data):
            pass

    with pytest.raises(NoObservationError):
        control_loop(Silent(), lambda e: np.zeros(1), startup_timeout_s=0.05)


def test_episode_reset_reaches_the_car():
    s = session()
    s.run_control(500_000, counting_policy(), episode=1)
    s.run_control(500_000, counting_policy(), episode=2)
    assert s.car.env.resets == 2


def test_tcp_round_trip_on_localhost():
    server = TcpServer("127.0.0.1", 0)
    env = StubCar()
    stop = threading.Event()
    result = {}

    def car():
        result["node"] = car_loop(lambda: connect("127.0.0.1", server.port), env, obs_hz=20, stop=stop)

    t = threading.Thread(target=car, daemon=True)
    t.start()
    channel = server.accept(timeout=5)
    node = ControlNode(Publisher(channel, monotonic_us))
    channel.on_receive = node.dispatcher
    channel.start()
    try:
        node.send_episode(EPISODE_RESET, 1)
        control_loop(channel, lambda e: np.array([0.25]), control_hz=10, n_ticks=8, node=node,
                     startup_timeout_s=2.0)
        time.sleep(0.2)
    finally:
        stop.set()
        t.join(timeout=5)
        channel.close()
        server.close()
    assert node.stats.ticks == 8
    assert result["node"].published >= 8
    assert env.resets == 1 and 0.25 in env.applied


# ---------------------------------------------------------------- off-track detector


def test_bright_frame_is_off_track():
    assert detect_offtrack(np.full((120, 160), 0.9))


def test_dark_bottom_half_is_on_track():
    frame = np.full((120, 160), 0.9)
    frame[60:] = 0.2
    assert not detect_offtrack(frame, OfftrackDetectorConfig(threshold=0.5, min_fraction=0.05, roi_start=0.5))


def test_detector_reads_uint8_and_only_the_roi():
    frame = np.full((120, 160), 230, dtype=np.uint8)
    frame[:100] = 10  # dark above the ROI only
    cfg = OfftrackDetectorConfig()
    assert dark_fraction(frame, cfg) == 0.0 and detect_offtrack(frame, cfg)


def test_detector_config_validation():
    with pytest.raises(ValueError):
        OfftrackDetectorConfig(threshold=1.5).validate()
    with pytest.raises(ValueError):
        OfftrackDetectorConfig(roi_start=1.0).validate()


def test_detector_agrees_with_geometry_on_edge_sweep():
    assert detector_agreement(n_poses=500, seed=0, track_seed=0) >= 0.95
