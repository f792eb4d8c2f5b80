"""
Sensor stream at 10 Hz
======================

The sensor emits one framed packet every 100 ms into a two-slot ping-pong
buffer. A consumer that keeps up sees every frame. A slower one always
takes the newest frame, and the frames it skips are counted as drops.
"""

from litesr.protocol import StreamConfig, StreamParser, encode_packet, simulate_stream, synthetic_frames

config = StreamConfig(period_ms=100, iterations=30)

for delay in (0, 150, 300):
    stats = simulate_stream(config, synthetic_frames(30, seed=1), consumer_delay_ms=delay)
    print(f"consumer {delay:3d} ms: {stats.effective_fps:5.2f} fps, {stats.drops:2d} drops, "
          f"took {stats.consumed_sequences[:8]}")

# The wire format survives garbage on the line.
pair = next(synthetic_frames(1))
packet = encode_packet(pair)
parser = StreamParser()
frames = parser.feed(b"\x00\xffnoise" + packet + packet[:100])
diag = parser.diagnostics
print(f"{len(packet)}-byte packet; parsed {len(frames)} frame, resync={diag.resync}, "
      f"discarded {diag.bytes_discarded} bytes, {parser.buffered} bytes of the next packet buffered")
