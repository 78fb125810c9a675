import os

import pytest

from xmodal import formats
from xmodal.errors import FormatError


def test_atomic_write_replaces_file(tmp_path):
    path = tmp_path / 'sub' / 'out.bin'
    formats.write_bytes_atomic(path, b'first')
    formats.write_bytes_atomic(path, b'second')
    assert path.read_bytes() == b'second'
    assert os.listdir(tmp_path / 'sub') == ['out.bin']


def test_failed_rename_removes_temporary(monkeypatch, tmp_path):
    path = tmp_path / 'out.bin'
    path.write_bytes(b'old')

    def refuse(src, dst):
        raise OSError('disk full')

    monkeypatch.setattr(formats.os, 'replace', refuse)
    with pytest.raises(OSError):
        formats.write_bytes_atomic(path, b'new')
    assert path.read_bytes() == b'old'
    assert not (tmp_path / 'out.bin.tmp').exists()


def test_reader_reports_truncation_offset():
    w = formats.Writer(b'TEST', 1)
    w.pack('I', 7)
    r = formats.Reader(w.getvalue(), b'TEST')
    assert r.unpack('I') == (7,)
    with pytest.raises(FormatError) as exc:
        r.unpack('Q')
    assert exc.value.offset == 12


def test_reader_rejects_unknown_version():
    data = formats.Writer(b'TEST', 3).getvalue()
    with pytest.raises(FormatError) as exc:
        formats.Reader(data, b'TEST', versions=(1, 2))
    assert exc.value.offset == 4
