"""Client for an external image-editing service, plus an echo stub for tests.

The client POSTs ``multipart/form-data`` with an ``image`` file part and a
``prompt`` field, and expects image bytes back. Failures are raised to the
caller immediately; nothing is retried.
"""

from __future__ import annotations

import email.parser
import email.policy
import json
import threading
import urllib.parse
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import requests

PROMPT_HEADER = "X-Edit-Prompt"


class EditServiceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditResult:
    output_path: Path
    metadata_path: Path
    metadata: dict


def edit_image_client(
    record_id: str,
    image_path: str | Path,
    prompt: str,
    service_url: str,
    out_dir: str | Path,
    timeout: float = 120.0,
) -> EditResult:
    """Send one image and prompt; store ``<record_id>.edited.png`` and its metadata."""
    if not prompt or not prompt.strip():
        raise ValueError("refusing to call the edit service with an empty prompt")
    if not service_url:
        raise ValueError("edit service URL is not set")
    image_path = Path(image_path)
    image = image_path.read_bytes()
    try:
        resp = requests.post(
            service_url,
            files={"image": (image_path.name, image, "application/octet-stream")},
            data={"prompt": prompt},
            timeout=timeout,
        )
    except requests.RequestException as exc:
        raise EditServiceError(f"edit service unreachable: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise EditServiceError(f"edit service returned HTTP {resp.status_code}")
    ctype = resp.headers.get("Content-Type", "")
    if not ctype.startswith("image/") or not resp.content:
        raise EditServiceError(f"edit service returned non-image content ({ctype or 'no type'})")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    output = out_dir / f"{record_id}.edited.png"
    output.write_bytes(resp.content)
    metadata = {
        "record_id": record_id,
        "source_image": str(image_path),
        "prompt": prompt,
        "service_url": service_url,
        "status_code": resp.status_code,
        "content_type": ctype,
        "bytes": len(resp.content),
        "service_prompt": urllib.parse.unquote(resp.headers.get(PROMPT_HEADER, "")),
    }
    meta_path = out_dir / f"{record_id}.edited.json"
    meta_path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EditResult(output, meta_path, metadata)


def parse_multipart(content_type: str, body: bytes) -> dict[str, bytes]:
    raw = f"Content-Type: {content_type}\r\nMIME-Version: 1.0\r\n\r\n".encode("latin-1") + body
    msg = email.parser.BytesParser(policy=email.policy.HTTP).parsebytes(raw)
    if not msg.is_multipart():
        raise ValueError("expected multipart/form-data")
    parts = {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        if name:
            parts[name] = part.get_payload(decode=True) or b""
    return parts


class _EchoHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length)
        try:
            parts = parse_multipart(self.headers.get("Content-Type", ""), body)
            image, prompt = parts["image"], parts["prompt"].decode("utf-8")
        except (KeyError, ValueError, UnicodeDecodeError) as exc:
            self.send_error(400, str(exc))
            return
        self.server.requests_seen.append({"prompt": prompt, "bytes": len(image)})
        self.send_response(200)
        self.send_header("Content-Type", "image/png")
        self.send_header("Content-Length", str(len(image)))
        self.send_header(PROMPT_HEADER, urllib.parse.quote(prompt))
        self.end_headers()
        self.wfile.write(image)

    def log_message(self, *args):
        pass


class EchoEditServer:
    """In-process stub service that returns the uploaded image unchanged."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.httpd = ThreadingHTTPServer((host, port), _EchoHandler)
        self.httpd.requests_seen = []
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/edit"

    @property
    def requests_seen(self) -> list[dict]:
        return self.httpd.requests_seen

    def __enter__(self) -> "EchoEditServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
