import hashlib

import pytest

from poul.enclave import (
    ChannelEndpoint,
    ChannelError,
    Enclave,
    EnclaveError,
    Program,
    SealError,
    measure,
    verify_attestation,
)


def echo(ctx, inp):
    ctx.mem["calls"] = ctx.mem.get("calls", 0) + 1
    return inp, inp


def other(ctx, inp):
    return None, b"other"


PROGS = (Program("echo", echo),)


def test_resume_is_attested():
    enc, pk = Enclave.init()
    eid = enc.install(PROGS)
    assert eid == measure(PROGS)
    out, att = enc.resume(eid, "echo", b"hello")
    assert out == b"hello"
    assert verify_attestation(pk, att, b"hello")
    assert not verify_attestation(pk, att, b"hellO")
    assert not verify_attestation(Enclave().pk, att, b"hello")


def test_identity_depends_on_code():
    assert measure(PROGS) != measure((Program("echo", other),))
    assert measure(PROGS) != measure((Program("echo2", echo),))


def test_unknown_eid_or_program():
    enc = Enclave()
    eid = enc.install(PROGS)
    with pytest.raises(EnclaveError):
        enc.resume(bytes(32), "echo", b"")
    with pytest.raises(EnclaveError):
        enc.resume(eid, "missing", b"")


def test_fresh_seeds_do_not_repeat():
    enc = Enclave()
    seeds = [enc.fresh_seed() for _ in range(5000)]
    assert len(set(seeds)) == len(seeds)


def test_seal_round_trip_keeps_key_and_counter():
    key = b"k" * 32
    enc = Enclave(platform_key=key)
    eid = enc.install(PROGS)
    enc.resume(eid, "echo", b"x")
    enc.fresh_seed()
    blob = enc.seal_state()
    restored = Enclave(platform_key=key)
    restored.install(PROGS)
    restored.unseal_state(blob)
    assert restored.pk == enc.pk
    assert restored.state_digest() == enc.state_digest()
    assert restored.fresh_seed() == enc.fresh_seed()
    _, att = restored.resume(eid, "echo", b"y")
    assert verify_attestation(enc.pk, att, b"y")


def test_seal_rejects_other_platform_and_tampering():
    enc = Enclave(platform_key=b"a" * 32)
    enc.install(PROGS)
    blob = enc.seal_state()
    stranger = Enclave(platform_key=b"b" * 32)
    stranger.install(PROGS)
    with pytest.raises(SealError):
        stranger.unseal_state(blob)
    same = Enclave(platform_key=b"a" * 32)
    same.install(PROGS)
    with pytest.raises(SealError):
        same.unseal_state(blob[:-1] + bytes([blob[-1] ^ 1]))
    wrong_code = Enclave(platform_key=b"a" * 32)
    wrong_code.install((Program("echo", other),))
    with pytest.raises(SealError):
        wrong_code.unseal_state(blob)


def test_channel_agreement_and_pinning():
    a, b = Enclave(), Enclave()
    ea, eb = a.install(PROGS), b.install((Program("other", other),))
    ca, cb = ChannelEndpoint(a, ea), ChannelEndpoint(b, eb)
    ka = ca.accept(cb.offer(ea), b.pk, eb)
    kb = cb.accept(ca.offer(eb), a.pk, ea)
    assert ka == kb
    assert cb.check(b"msg", ca.tag(b"msg"))
    assert not cb.check(b"msG", ca.tag(b"msg"))
    mallory = Enclave()
    mallory.install((Program("other", other),))
    with pytest.raises(ChannelError):
        ChannelEndpoint(a, ea).accept(ChannelEndpoint(mallory, eb).offer(ea), b.pk, eb)


def test_attestation_message_layout():
    enc = Enclave()
    eid = enc.install(PROGS)
    _, att = enc.resume(eid, "echo", b"z")
    assert att.message == eid + att.prog_id + hashlib.sha256(b"z").digest()
