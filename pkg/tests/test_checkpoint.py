"""Content-addressed checkpoint serialization and identity."""

import numpy as np
import pytest

from elmforest.corpus import DifficultyTier
from elmforest.errors import DimensionMismatch, MissingArtifact
from elmforest.tinylm import ExpertCheckpoint, LineageEntry, init_params
from elmforest.tinylm.checkpoint import deserialize_checkpoint, load_checkpoint


@pytest.fixture
def ckpt(tiny_config, tiny_params):
    lineage = (LineageEntry(iteration=1, domain="news", parent_id="0" * 64),)
    return ExpertCheckpoint.create(tiny_config, tiny_params, step=40,
                                   lineage=lineage)


def test_id_is_deterministic(tiny_config, tiny_params, ckpt):
    again = ExpertCheckpoint.create(tiny_config, tiny_params, step=40,
                                    lineage=ckpt.lineage)
    assert again.checkpoint_id == ckpt.checkpoint_id
    assert len(ckpt.checkpoint_id) == 64
    assert ckpt.short_id() == ckpt.checkpoint_id[:12]


def test_id_covers_params(tiny_config, tiny_params, ckpt):
    bumped = {k: v.copy() for k, v in tiny_params.items()}
    bumped["embed"][0, 0] += 1e-3
    other = ExpertCheckpoint.create(tiny_config, bumped, step=40,
                                    lineage=ckpt.lineage)
    assert other.checkpoint_id != ckpt.checkpoint_id


def test_id_covers_step_and_lineage(tiny_config, tiny_params, ckpt):
    assert ExpertCheckpoint.create(
        tiny_config, tiny_params, step=41, lineage=ckpt.lineage
    ).checkpoint_id != ckpt.checkpoint_id
    assert ExpertCheckpoint.create(
        tiny_config, tiny_params, step=40, lineage=()
    ).checkpoint_id != ckpt.checkpoint_id


def test_tier_does_not_change_id(tiny_config, tiny_params, ckpt):
    tiered = ExpertCheckpoint.create(
        tiny_config.with_tier(DifficultyTier.DIFFICULT), tiny_params,
        step=40, lineage=ckpt.lineage)
    assert tiered.checkpoint_id == ckpt.checkpoint_id
    relabeled = ckpt.with_tier(DifficultyTier.EASY)
    assert relabeled.checkpoint_id == ckpt.checkpoint_id
    assert relabeled.config.tier == DifficultyTier.EASY


def test_serialize_round_trip(ckpt):
    data = ckpt.serialize()
    assert data == ckpt.serialize()
    back = deserialize_checkpoint(data)
    assert back.checkpoint_id == ckpt.checkpoint_id
    assert back.step == ckpt.step
    assert back.lineage == ckpt.lineage
    assert back.config == ckpt.config
    assert all(np.array_equal(back.params[k], ckpt.params[k]) for k in ckpt.params)
    assert all(back.params[k].dtype == np.float32 for k in back.params)


def test_save_and_load(tmp_path, ckpt):
    path = ckpt.save(tmp_path / "expert.ckpt")
    assert load_checkpoint(path).checkpoint_id == ckpt.checkpoint_id


def test_load_missing_file(tmp_path):
    with pytest.raises(MissingArtifact):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic_rejected(ckpt):
    data = bytearray(ckpt.serialize())
    data[:4] = b"JUNK"
    with pytest.raises(DimensionMismatch):
        deserialize_checkpoint(bytes(data))


def test_truncation_rejected(ckpt):
    data = ckpt.serialize()
    with pytest.raises(DimensionMismatch):
        deserialize_checkpoint(data[:-3])


def test_blob_corruption_detected(ckpt):
    data = bytearray(ckpt.serialize())
    data[-2] ^= 0xFF
    with pytest.raises(DimensionMismatch):
        deserialize_checkpoint(bytes(data))


def test_float64_params_stored_as_float32(tiny_config):
    params = init_params(tiny_config, seed=9, dtype=np.float64)
    ckpt64 = ExpertCheckpoint.create(tiny_config, params, step=0, lineage=())
    back = deserialize_checkpoint(ckpt64.serialize())
    assert back.params["embed"].dtype == np.float32


def test_logprob_helpers_delegate(ckpt):
    tokens = np.arange(6)
    rows = ckpt.position_logprobs(tokens)
    assert rows.shape == (6, ckpt.config.vocab_size)
    np.testing.assert_allclose(np.exp(rows).sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(ckpt.next_token_logprobs(tokens), rows[-1])
