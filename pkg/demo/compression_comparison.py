"""Compare block codecs on one simulated second of tags.

Encodes the same calibrated blocks with each codec and prints bytes/tag
and the reduction against the 14.32 bytes/tag raw vendor baseline.
"""

from tagstream import cli, clocksim, codec, ttagent

# One busy second: ~600k singles on Bob's channel.
config = clocksim.default_scenario(duration_s=1, pair_rate_hz=1.32e7)
_, stream_b, _ = clocksim.simulate(config)
blocks, counters = ttagent.run_pipeline(stream_b, [config.channel_b])
print(f"{counters.tags_in} tags in, {counters.blocks_out} blocks")

baseline = cli.RAW_BASELINE_BYTES_PER_TAG
print(f"\n{'codec':<24}{'bytes/tag':>12}{'reduction':>12}")
print(f"{'raw vendor baseline':<24}{baseline:>12.2f}{'':>12}")
for codec_id, name in [(codec.CODEC_RAW40, "raw 40-bit"),
                       (codec.CODEC_DELTA_VARINT, "delta+varint"),
                       (codec.CODEC_DELTA_VARINT_ZLIB, "delta+varint+deflate")]:
    encoded = [codec.encode(b, codec_id) for b in blocks]
    bpt = float(codec.bytes_per_tag(encoded))
    reduction = (baseline - bpt) / baseline * 100
    print(f"{name:<24}{bpt:>12.2f}{reduction:>11.1f}%")
