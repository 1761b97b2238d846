#!/usr/bin/env python3
"""Rebuild the bundled plain-text corpus from documentation that ships with CPython.

Output is deterministic for a given interpreter version: the language reference
topics followed by module docstrings from a fixed list of stdlib modules.
"""
import argparse
import importlib
import inspect
import pathlib

import pydoc_data.topics

MODULES = [
    "abc", "argparse", "array", "ast", "asyncio", "base64", "bisect", "calendar",
    "cmd", "codecs", "collections", "concurrent.futures", "configparser",
    "contextlib", "copy", "csv", "dataclasses", "datetime", "decimal", "difflib",
    "email", "enum", "filecmp", "fnmatch", "fractions", "functools", "getopt",
    "gettext", "glob", "gzip", "hashlib", "heapq", "hmac", "html", "http.client",
    "http.server", "imaplib", "inspect", "io", "ipaddress", "itertools", "json",
    "logging", "mailbox", "math", "mimetypes", "multiprocessing", "numbers",
    "operator", "optparse", "os", "pathlib", "pickle", "pkgutil", "platform",
    "plistlib", "pprint", "queue", "random", "re", "sched", "secrets", "selectors",
    "shelve", "shlex", "shutil", "signal", "smtplib", "socket", "socketserver",
    "sqlite3", "statistics", "string", "struct", "subprocess", "tarfile",
    "tempfile", "textwrap", "threading", "timeit", "tokenize", "traceback",
    "turtle", "typing", "unittest", "urllib.parse", "urllib.request", "uuid",
    "warnings", "weakref", "xml.dom.minidom", "zipfile", "zoneinfo",
    "xml.etree.ElementTree", "ftplib", "poplib", "nntplib", "telnetlib", "wave",
    "aifc", "sunau", "chunk", "colorsys", "imghdr", "sndhdr", "netrc", "mailcap",
    "quopri", "uu", "binhex", "bdb", "pdb", "profile", "pstats", "trace", "tracemalloc",
    "doctest", "pydoc", "code", "codeop", "zipimport", "importlib", "runpy",
    "modulefinder", "symtable", "tabnanny", "compileall", "dis", "pickletools",
    "locale", "reprlib", "graphlib", "contextvars", "asyncio.events", "asyncio.tasks",
    "asyncio.streams", "email.message", "email.policy", "email.utils",
    "http.cookies", "http.cookiejar", "urllib.robotparser", "xmlrpc.client",
    "xmlrpc.server", "wsgiref.simple_server", "ssl", "lzma", "bz2", "zlib",
    "tkinter", "idlelib.editor", "lib2to3.pytree", "distutils.core", "venv",
]


def docstrings(module_name):
    try:
        mod = importlib.import_module(module_name)
    except Exception:
        return []
    out = []
    doc = inspect.getdoc(mod)
    if doc:
        out.append(doc)
    for name, obj in sorted(vars(mod).items()):
        if name.startswith("_"):
            continue
        if getattr(obj, "__module__", None) != mod.__name__:
            continue
        doc = inspect.getdoc(obj)
        if doc and len(doc) > 120:
            out.append(f"{name}\n\n{doc}")
        if inspect.isclass(obj):
            for attr, member in sorted(vars(obj).items()):
                if attr.startswith("_"):
                    continue
                doc = inspect.getdoc(member)
                if doc and len(doc) > 120:
                    out.append(f"{name}.{attr}\n\n{doc}")
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="corpus")
    ap.add_argument("--limit", type=int, default=1_080_000)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    topics = "\n\n".join(pydoc_data.topics.topics[k] for k in sorted(pydoc_data.topics.topics))
    (out / "language_reference.txt").write_text(topics, encoding="utf-8")

    budget = args.limit - len(topics.encode())
    parts, seen = [], set()
    for m in MODULES:
        for d in docstrings(m):
            if d in seen:
                continue
            seen.add(d)
            enc = d.encode("utf-8", "ignore")
            if budget - len(enc) - 2 < 0:
                break
            parts.append(d)
            budget -= len(enc) + 2
    (out / "library_docstrings.txt").write_text("\n\n".join(parts), encoding="utf-8")


if __name__ == "__main__":
    main()
