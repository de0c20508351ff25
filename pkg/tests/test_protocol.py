import json
import os

import numpy as np
import pytest
from conftest import small_config

from poul import ml, sisa
from poul.data import DataPoint
from poul.enclave import Enclave
from poul.protocol import (
    PROGRAMS,
    LearnProof,
    PoulConfig,
    PoulServer,
    PredictProof,
    ProtocolError,
    Receipt,
    Session,
    StaleCommitment,
    Transcript,
    Unauthorized,
    Verifier,
    WrongModel,
    verify_transcript,
)


def test_honest_setup_and_deletion_verify(small_ds):
    s = Session(small_config(n_shards=2))
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    assert setup.ok
    assert len(setup.steps) == 6
    kid = small_ds.points()[5].kid
    phase = s.deletion_phase([kid], small_ds.X_test[1])
    assert phase.ok
    assert phase.affected[kid] == list(range(s.server.auth_view().entry(kid).slice_index, 4))
    _, absent = s.check_absent(small_ds.points()[5])
    assert absent
    mp, ok = s.check_absent(small_ds.points()[6])
    assert not ok and mp.present


def test_prediction_matches_aggregated_final_models(small_ds):
    s = Session(small_config(n_shards=2))
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[2])
    expected = sisa.aggregate_predict(s.server.final_models(), small_ds.X_test[2])
    assert setup.predict.p == expected


def test_server_chain_matches_retrain_oracle(small_ds):
    cfg = small_config(n_slices=3)
    s = Session(cfg)
    s.setup_phase(small_ds.points(), small_ds.X_test[0])
    victims = [s.plan.slices[0][2][0], s.plan.slices[0][0][1]]
    assert s.deletion_phase(victims, small_ds.X_test[0]).ok
    row_of = {p.kid: r for r, p in enumerate(small_ds.points())}
    rows = [[row_of[k] for k in sl if k not in victims] for sl in s.plan.slices[0]]
    m0 = ml.init_model(cfg.dims, cfg.model_seed)
    oracle = sisa.train_chain_plain(small_ds.X_train.astype(np.float32), small_ds.y_train, rows, m0, cfg.hp, 0)
    assert s.server.final_models()[0] == oracle[-1]


def test_verifier_rejects_foreign_signer_and_session(small_ds):
    s = Session(small_config())
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    stranger = Verifier(Enclave().pk, s.sid)
    assert not stranger.receipt(setup.receipt)
    other_sid = Verifier(s.server.pk, os.urandom(16))
    assert not other_sid.receipt(setup.receipt)
    forged = Receipt(s.sid, s.server.eid, os.urandom(32), setup.receipt.h_keys, setup.receipt.attestation)
    fresh = Verifier(s.server.pk, s.sid)
    assert not fresh.receipt(forged)


def test_verifier_rejects_swapped_prediction_and_wrong_challenge(small_ds):
    s = Session(small_config())
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    v = s.verifier
    v.challenge(small_ds.X_test[0])
    flipped = type(setup.predict.p)(setup.predict.p.scores[::-1], 1 - setup.predict.p.label)
    fake = PredictProof(s.sid, s.server.eid, flipped, setup.predict.t, setup.predict.h_models, setup.predict.attestation)
    assert not v.predict(fake)
    v.challenge(small_ds.X_test[1])
    assert not v.predict(setup.predict)


def test_learn_proof_for_other_commitment_is_rejected(small_ds):
    s = Session(small_config())
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    altered = LearnProof(s.sid, s.server.eid, bytes(32), setup.learn.h_models, setup.learn.attestation)
    assert not s.verifier.learn(altered)


def test_stale_commitment_and_wrong_model_halt(small_ds):
    s = Session(small_config())
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    s.deletion_phase([small_ds.points()[0].kid], small_ds.X_test[0])
    with pytest.raises(StaleCommitment):
        s.server.prove_learning(s.sid, s.server.eid, setup.receipt.h_c)
    with pytest.raises(WrongModel):
        s.server.prove_prediction(s.sid, s.server.eid, small_ds.X_test[0], setup.learn.h_models)
    with pytest.raises(ProtocolError):
        s.server.prove_learning(s.sid, bytes(32), setup.receipt.h_c)


def test_deletion_request_errors(small_ds):
    s = Session(small_config())
    s.setup_phase(small_ds.points(), small_ds.X_test[0])
    kid = small_ds.points()[0].kid
    with pytest.raises(ProtocolError):
        s.server.commit_del(s.sid, [kid, kid])
    s.deletion_phase([kid], small_ds.X_test[0])
    with pytest.raises(ProtocolError):
        s.server.commit_del(s.sid, [kid])


def test_multi_owner_requires_the_owner(small_ds):
    s = Session(small_config(multi_owner=True))
    alice = small_ds.points(b"alice")[:60]
    bob = small_ds.points(b"bob")[60:]
    items = s.place(alice + bob)
    with pytest.raises(Unauthorized):
        s.commit_points(items, b"alice")
    _, ok_a = s.multi_owner_commit(b"alice", items)
    _, ok_b = s.multi_owner_commit(b"bob", items)
    assert ok_a and ok_b
    assert s.train_and_prove(small_ds.X_test[0]).ok
    with pytest.raises(Unauthorized):
        s.server.commit_del(s.sid, [bob[0].kid], b"alice")
    assert s.deletion_phase([bob[0].kid], small_ds.X_test[0], b"bob").ok


def test_verification_cost_is_one_signature_per_assertion(small_ds):
    counts = []
    for slices in (1, 3, 6):
        s = Session(small_config(n_slices=slices))
        s.setup_phase(small_ds.points(), small_ds.X_test[0])
        s.verifier.stats.signature_checks = 0
        s.deletion_phase([small_ds.points()[1].kid], small_ds.X_test[0])
        counts.append(s.verifier.stats.signature_checks)
    assert counts == [3, 3, 3]


def test_transcript_replays_offline(small_ds, tmp_path):
    s = Session(small_config())
    s.setup_phase(small_ds.points(), small_ds.X_test[0])
    s.deletion_phase([small_ds.points()[2].kid], small_ds.X_test[0])
    s.transcript.write(tmp_path / "t.jsonl")
    results = verify_transcript(Transcript.read(tmp_path / "t.jsonl"))
    assert [k for _, k, _ in results] == ["receipt", "learn", "predict"] * 2
    assert all(ok for _, _, ok in results)
    assert not any(ok for _, _, ok in verify_transcript(Transcript.read(tmp_path / "t.jsonl"), pk=Enclave().pk))


def test_persisted_session_resumes(small_ds, tmp_path):
    key = os.urandom(32)
    cfg = small_config()
    s = Session(cfg, enclave=Enclave(platform_key=key), store_dir=tmp_path)
    s.setup_phase(small_ds.points(), small_ds.X_test[0])
    sealed = s.server.enclave.seal_state()
    ver = json.dumps(s.verifier.to_json())
    s.server.data_store.close()
    s.server.model_store.close()

    enclave = Enclave(platform_key=key)
    enclave.install(PROGRAMS)
    enclave.unseal_state(sealed)
    verifier = Verifier.from_json(json.loads(ver))
    server = PoulServer(PoulConfig.from_json(cfg.to_json()), enclave, tmp_path, verifier.pins.sid)
    again = Session.resume(server, verifier, s.transcript)
    assert again.deletion_phase([small_ds.points()[3].kid], small_ds.X_test[0]).ok


def test_config_json_round_trip():
    cfg = small_config(n_shards=2, multi_owner=True)
    assert PoulConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


def test_datapoint_kid_is_what_the_enclave_computes():
    p = DataPoint(np.arange(3, dtype=np.float32), 1)
    enclave = Enclave()
    eid = enclave.install(PROGRAMS)
    kid, _ = enclave.resume(eid, "prog_k", {"point": p})
    assert kid == p.kid
