import dataclasses

import pytest
from conftest import small_config

from poul.auditor import Auditor, CallRecord, recompute_verdict, verify_alert, verify_report
from poul.enclave import ChannelError, Enclave
from poul.protocol import Session


@pytest.fixture
def watched(small_ds):
    s = Session(small_config())
    s.setup_phase(small_ds.points(), small_ds.X_test[0])
    auditor = Auditor(s.verifier.pins)
    tap = auditor.establish_channel(s.server)
    return s, auditor, tap


def test_honest_predictions_log_without_alerts(watched, small_ds):
    s, auditor, _ = watched
    s.train_and_prove(small_ds.X_test[1])
    s.deletion_phase([small_ds.points()[0].kid], small_ds.X_test[2])
    for k in range(3):
        s._predict(small_ds.X_test[k])
    report = auditor.fetch_reports()
    assert report.count == 7
    assert not report.alerts
    assert verify_report(auditor.pk, report)
    assert all(recompute_verdict(e, s.verifier.pins) == e.verdict for e in report.entries)


def test_stale_prediction_raises_signed_alert(watched, small_ds):
    s, auditor, tap = watched
    first = s.train_and_prove(small_ds.X_test[0])
    s.deletion_phase([small_ds.points()[0].kid], small_ds.X_test[0])
    tap("predict", first.predict)
    report = auditor.fetch_reports()
    assert [a.failure for a in report.alerts] == ["stale-model"]
    assert verify_alert(auditor.pk, report.alerts[0])
    assert not recompute_verdict(report.entries[-1], s.verifier.pins)


def test_prediction_before_any_learning_is_flagged(small_ds):
    s = Session(small_config())
    setup = s.setup_phase(small_ds.points(), small_ds.X_test[0])
    auditor = Auditor(s.verifier.pins)
    tap = auditor.establish_channel(s.server)
    tap("predict", setup.predict)
    assert auditor.alerts[0].failure == "no-learned-model"


def test_foreign_signature_is_flagged(watched, small_ds):
    s, auditor, tap = watched
    other = Session(small_config())
    forged = other.setup_phase(small_ds.points(), small_ds.X_test[0]).learn
    tap("learn", forged)
    assert auditor.alerts[-1].failure == "bad-attestation"


def test_tampered_or_reordered_observations_are_refused(watched, small_ds):
    s, auditor, tap = watched
    phase = s.train_and_prove(small_ds.X_test[0])
    body = CallRecord.encode("predict", phase.predict)
    bad_tag = CallRecord(tap.seq, "predict", body, bytes(32))
    with pytest.raises(ChannelError):
        auditor.observe_and_verify(bad_tag, phase.predict)
    rec = CallRecord(tap.seq + 5, "predict", body, b"")
    rec = dataclasses.replace(rec, tag=tap.endpoint.tag(rec.authenticated()))
    with pytest.raises(ChannelError):
        auditor.observe_and_verify(rec, phase.predict)


def test_truncated_or_edited_log_fails_report_check(watched, small_ds):
    s, auditor, _ = watched
    for k in range(4):
        s.train_and_prove(small_ds.X_test[k])
    report = auditor.fetch_reports()
    assert verify_report(auditor.pk, report)
    assert not verify_report(auditor.pk, report, report.entries[:-1])
    edited = [dataclasses.replace(report.entries[0], verdict=False)] + report.entries[1:]
    assert not verify_report(auditor.pk, report, edited)
    assert not verify_report(Enclave().pk, report)
    partial = auditor.fetch_reports(0, 3)
    assert partial.count == 3 and verify_report(auditor.pk, partial)
