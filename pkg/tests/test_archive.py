import json
import struct

import numpy as np
import pytest

from srkit.archive import MAGIC, VERSION, ArchiveError, load_archive, save_archive
from srkit.graph import run_graph
from srkit.models import build_span_baseline, build_spanv2
from srkit.rewrites import decorate_for_reparam
from conftest import rand_tensor


def _tensors_of(g):
    out = {}
    for n in g.conv_nodes():
        if n.spec is not None:
            out[f"{n.name}.weight"] = n.spec.weight
            if n.spec.bias is not None:
                out[f"{n.name}.bias"] = n.spec.bias
        if n.lora is not None:
            out[f"{n.name}.lora_a"] = n.lora.a
            out[f"{n.name}.lora_b"] = n.lora.b
        if n.branches is not None:
            for i, b in enumerate(n.branches.branches):
                out[f"{n.name}.branch{i}.weight"] = b.weight
                if b.bias is not None:
                    out[f"{n.name}.branch{i}.bias"] = b.bias
    return out


class TestRoundtrip:
    @pytest.mark.parametrize("builder", [build_spanv2, build_span_baseline])
    def test_bit_exact_tensors(self, tmp_path, builder):
        g = builder(seed=5)
        path = tmp_path / "model.srwt"
        save_archive(g, path)
        loaded = load_archive(path)
        before, after = _tensors_of(g), _tensors_of(loaded)
        assert before.keys() == after.keys()
        for name in before:
            assert np.array_equal(before[name], after[name]), name
            assert before[name].dtype == after[name].dtype == np.float32

    def test_bytes_stable_across_save_load_save(self, tmp_path):
        g = build_spanv2(seed=5)
        p1, p2 = tmp_path / "a.srwt", tmp_path / "b.srwt"
        save_archive(g, p1)
        save_archive(load_archive(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_reparam_decorations_roundtrip(self, tmp_path, rng):
        g = decorate_for_reparam(build_spanv2(seed=8), seed=8)
        path = tmp_path / "train.srwt"
        save_archive(g, path)
        loaded = load_archive(path)
        x = rand_tensor(rng, 1, 3, 6, 6)
        a, b = run_graph(g, x), run_graph(loaded, x)
        assert np.array_equal(a.data, b.data)
        node = loaded.node("b2.conv_c")
        assert node.branches is not None and node.branches.include_identity

    def test_seed_recorded(self, tmp_path):
        g = build_spanv2(seed=123)
        path = tmp_path / "model.srwt"
        save_archive(g, path)
        header = _read_header(path)
        assert header["seed"] == 123

    def test_loaded_graph_runs(self, tmp_path, rng):
        g = build_spanv2(seed=5)
        path = tmp_path / "model.srwt"
        save_archive(g, path)
        loaded = load_archive(path)
        x = rand_tensor(rng, 1, 3, 4, 4)
        assert np.array_equal(run_graph(g, x).data, run_graph(loaded, x).data)


def _read_header(path):
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<I", raw[6:10])
    return json.loads(raw[10 : 10 + hlen])


def _write(path, header: dict, payload: bytes, magic=MAGIC, version=VERSION):
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", version, len(blob)))
        fh.write(blob)
        fh.write(payload)


class TestMalformed:
    @pytest.fixture
    def good(self, tmp_path):
        path = tmp_path / "good.srwt"
        save_archive(build_spanv2(c=8, s=2, blocks=1, seed=0), path)
        return path

    def test_bad_magic(self, tmp_path, good):
        bad = tmp_path / "bad.srwt"
        raw = bytearray(good.read_bytes())
        raw[:4] = b"NOPE"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ArchiveError, match="bad magic"):
            load_archive(bad)

    def test_unsupported_version(self, tmp_path, good):
        bad = tmp_path / "bad.srwt"
        raw = bytearray(good.read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        bad.write_bytes(bytes(raw))
        with pytest.raises(ArchiveError, match="version"):
            load_archive(bad)

    def test_truncated_payload(self, tmp_path, good):
        bad = tmp_path / "bad.srwt"
        bad.write_bytes(good.read_bytes()[:-20])
        with pytest.raises(ArchiveError, match="covered|truncated"):
            load_archive(bad)

    def test_overlapping_offsets_rejected(self, tmp_path, good):
        raw = good.read_bytes()
        (hlen,) = struct.unpack("<I", raw[6:10])
        header = json.loads(raw[10 : 10 + hlen])
        payload = raw[10 + hlen :]
        header["tensors"][1]["offset"] = 0  # collides with the first tensor
        bad = tmp_path / "bad.srwt"
        _write(bad, header, payload)
        with pytest.raises(ArchiveError, match="overlapping"):
            load_archive(bad)

    def test_unresolved_tensor_name(self, tmp_path, good):
        raw = good.read_bytes()
        (hlen,) = struct.unpack("<I", raw[6:10])
        header = json.loads(raw[10 : 10 + hlen])
        payload = raw[10 + hlen :]
        removed = header["tensors"].pop()  # drop the last directory entry
        payload = payload[: removed["offset"]]
        bad = tmp_path / "bad.srwt"
        _write(bad, header, payload)
        with pytest.raises(ArchiveError, match="unresolved"):
            load_archive(bad)

    def test_corrupt_header_json(self, tmp_path, good):
        raw = bytearray(good.read_bytes())
        raw[10] = 0x58  # stomp the header's opening brace
        bad = tmp_path / "bad.srwt"
        bad.write_bytes(bytes(raw))
        with pytest.raises(ArchiveError, match="header"):
            load_archive(bad)

    def test_gapped_offsets_rejected(self, tmp_path, good):
        raw = good.read_bytes()
        (hlen,) = struct.unpack("<I", raw[6:10])
        header = json.loads(raw[10 : 10 + hlen])
        payload = raw[10 + hlen :]
        header["tensors"][-1]["offset"] += 8
        bad = tmp_path / "bad.srwt"
        _write(bad, header, payload + b"\0" * 8)
        with pytest.raises(ArchiveError, match="gapped"):
            load_archive(bad)
