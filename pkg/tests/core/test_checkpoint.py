import dataclasses
import json
import struct

import numpy as np
import pytest

from errors import CheckpointError, MissingPathError
from reportgen.core.checkpoint import MAGIC, VERSION, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint


class TestCheckpoint:
    """
    Test suite for the binary checkpoint format.
    """

    def test_round_trip_through_float32(self, tmp_path, toy_params, toy_config):
        """
        GIVEN initialized parameters
        WHEN they are saved and loaded
        THEN the config is unchanged and every tensor equals its float32 rounding.
        """
        path = tmp_path / "model.rckt"
        save_checkpoint(path, toy_params, toy_config)
        params, config = load_checkpoint(path)

        assert config == toy_config
        assert list(params) == list(toy_params)
        for name, tensor in toy_params.items():
            assert params[name].data.dtype == np.float64
            assert np.array_equal(params[name].data, tensor.data.astype(np.float32).astype(np.float64))

    def test_encoding_is_deterministic(self, toy_params, toy_config):
        """
        GIVEN the same parameters
        WHEN they are encoded twice
        THEN the bytes are identical and start with the magic.
        """
        blob = encode_checkpoint(toy_params, toy_config)
        assert blob == encode_checkpoint(toy_params, toy_config)
        assert blob.startswith(MAGIC)

    def test_bad_magic(self, toy_params, toy_config):
        """
        GIVEN a blob with a corrupted magic
        WHEN it is decoded
        THEN a checkpoint error at offset 0 is raised.
        """
        blob = b"XCKT" + encode_checkpoint(toy_params, toy_config)[4:]
        with pytest.raises(CheckpointError) as e:
            decode_checkpoint(blob)
        assert e.value.offset == 0

    def test_unknown_version(self, toy_params, toy_config):
        """
        GIVEN a blob with version 9
        WHEN it is decoded
        THEN a checkpoint error is raised.
        """
        blob = bytearray(encode_checkpoint(toy_params, toy_config))
        blob[4] = 9
        with pytest.raises(CheckpointError):
            decode_checkpoint(bytes(blob))

    def test_truncated_blob_reports_offset(self, toy_params, toy_config):
        """
        GIVEN a blob cut in half
        WHEN it is decoded
        THEN a checkpoint error carries the offset where reading stopped.
        """
        blob = encode_checkpoint(toy_params, toy_config)
        with pytest.raises(CheckpointError) as e:
            decode_checkpoint(blob[:len(blob) // 2])
        assert e.value.offset is not None
        assert 0 < e.value.offset <= len(blob) // 2
        assert "truncated" in str(e.value)

    def test_trailing_bytes(self, toy_params, toy_config):
        """
        GIVEN a blob with extra bytes appended
        WHEN it is decoded
        THEN a checkpoint error is raised.
        """
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(toy_params, toy_config) + b"\x00\x00")

    def test_shape_disagrees_with_config(self, toy_params, toy_config):
        """
        GIVEN parameters written under a config with a different vocabulary size
        WHEN the blob is decoded
        THEN a checkpoint error is raised.
        """
        other = dataclasses.replace(toy_config, vocab_size=toy_config.vocab_size + 1)
        with pytest.raises(CheckpointError):
            decode_checkpoint(encode_checkpoint(toy_params, other))

    def test_missing_file(self, tmp_path):
        """
        GIVEN a path that does not exist
        WHEN it is loaded
        THEN a missing-path error is raised.
        """
        with pytest.raises(MissingPathError):
            load_checkpoint(tmp_path / "absent.rckt")

    @pytest.mark.parametrize("field, value", [("image_grid", ["a"]), ("d_model", "wide"), ("image_positional_encoding", 1)])
    def test_wrongly_typed_config(self, toy_params, toy_config, field, value):
        """
        GIVEN a blob whose embedded config holds a value of the wrong type
        WHEN it is decoded
        THEN a checkpoint error points at the config bytes.
        """
        blob = encode_checkpoint(toy_params, toy_config)
        (config_len,) = struct.unpack_from("<I", blob, len(MAGIC) + 1)
        header = len(MAGIC) + 5
        config_blob = json.dumps({**toy_config.to_dict(), field: value}).encode("utf-8")
        tampered = MAGIC + struct.pack("<BI", VERSION, len(config_blob)) + config_blob + blob[header + config_len:]

        with pytest.raises(CheckpointError) as e:
            decode_checkpoint(tampered)
        assert e.value.offset == header
