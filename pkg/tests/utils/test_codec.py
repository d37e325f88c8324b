import struct

import numpy as np
import pytest

from src.errors import DataError, FormatError
from src.utils.codec import FORMAT_VERSION, decode_container, encode_container, read_container, write_container

MAGIC = b'TEST'


def sample_payload():
    meta = {'kind': 'sample', 'note': 'x'}
    tensors = [('b', np.arange(6, dtype=float).reshape(2, 3)), ('a', np.array([np.pi, -0.0, 1e-300]))]
    return meta, tensors


@pytest.mark.unit
class TestContainer:

    def test_round_trip_is_bit_exact(self):
        """Decoded tensors and metadata match the originals exactly"""
        meta, tensors = sample_payload()
        decoded_meta, decoded = decode_container(encode_container(MAGIC, meta, tensors), MAGIC)
        assert decoded_meta['kind'] == 'sample'
        assert [t['name'] for t in decoded_meta['tensors']] == ['b', 'a']
        for name, value in tensors:
            assert decoded[name].tobytes() == value.astype('<f8').tobytes()
            assert decoded[name].shape == value.shape

    def test_reencode_is_byte_identical(self):
        """Encoding a decoded container reproduces the same bytes"""
        meta, tensors = sample_payload()
        blob = encode_container(MAGIC, meta, tensors)
        decoded_meta, decoded = decode_container(blob, MAGIC)
        decoded_meta.pop('tensors')
        again = encode_container(MAGIC, decoded_meta, [(name, decoded[name]) for name, _ in tensors])
        assert again == blob

    def test_header_layout(self):
        """Magic, version and metadata length open the file"""
        blob = encode_container(MAGIC, *sample_payload())
        magic, version, length = struct.unpack('<4sIQ', blob[:16])
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        assert blob[16:16 + length].startswith(b'{')

    def test_wrong_magic(self):
        """A different magic is rejected"""
        blob = encode_container(MAGIC, *sample_payload())
        with pytest.raises(FormatError, match='magic'):
            decode_container(blob, b'NOPE')

    def test_version_mismatch(self):
        """Unknown format versions are rejected"""
        blob = bytearray(encode_container(MAGIC, *sample_payload()))
        blob[4:8] = struct.pack('<I', FORMAT_VERSION + 1)
        with pytest.raises(FormatError, match='version'):
            decode_container(bytes(blob), MAGIC)

    @pytest.mark.parametrize('cut', [3, 12, 20, -1])
    def test_truncation(self, cut):
        """Cutting the file anywhere is a format error"""
        blob = encode_container(MAGIC, *sample_payload())
        with pytest.raises(FormatError):
            decode_container(blob[:cut], MAGIC)

    def test_trailing_bytes(self):
        """Extra bytes after the last tensor are rejected"""
        blob = encode_container(MAGIC, *sample_payload())
        with pytest.raises(FormatError, match='trailing'):
            decode_container(blob + b'\0', MAGIC)

    def test_files(self, tmp_path):
        """write/read go through the same codec"""
        path = write_container(str(tmp_path / 'nested' / 'f.bin'), MAGIC, *sample_payload())
        meta, tensors = read_container(path, MAGIC)
        assert meta['note'] == 'x'
        assert set(tensors) == {'a', 'b'}

    def test_missing_file(self, tmp_path):
        """Reading a missing file is a format error"""
        with pytest.raises(FormatError, match='not found'):
            read_container(str(tmp_path / 'none.bin'), MAGIC)

    def test_unwritable_path(self, tmp_path):
        """A path under a regular file cannot be written"""
        blocker = tmp_path / 'file'
        blocker.write_text('x')
        with pytest.raises(DataError):
            write_container(str(blocker / 'out.bin'), MAGIC, *sample_payload())
