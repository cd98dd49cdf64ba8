// SPDX-License-Identifier: Apache-2.0

//! The HTTP/1.0 subset the static-file service speaks: `GET` only,
//! `Content-Length` responses, one request per connection.

use std::io::{self, Read};
use std::path::Path;

use crate::hypercall::handlers::check_path;
use crate::hypercall::{HostFs, SandboxFs};

/// Largest request head accepted.
pub const MAX_REQUEST: usize = 4096;
pub const DEFAULT_DOCUMENT: &str = "index.html";

/// Document path of a `GET` request, relative to the document root.
///
/// `/` maps to [`DEFAULT_DOCUMENT`]; the query string is dropped. The path is
/// not sandbox-checked here.
pub fn request_path(req: &[u8]) -> Option<String> {
    let line_end = req.windows(2).position(|w| w == b"\r\n").unwrap_or(req.len());
    let line = std::str::from_utf8(&req[..line_end]).ok()?;
    let mut parts = line.split(' ');
    let (method, target, version) = (parts.next()?, parts.next()?, parts.next()?);
    if method != "GET" || !version.starts_with("HTTP/1.") || parts.next().is_some() {
        return None;
    }
    let target = target.split('?').next()?;
    let path = target.strip_prefix('/')?;
    Some(if path.is_empty() { DEFAULT_DOCUMENT } else { path }.to_owned())
}

pub fn ok_header(content_length: u64) -> Vec<u8> {
    format!("HTTP/1.0 200 OK\r\nContent-Length: {content_length}\r\nConnection: close\r\n\r\n").into_bytes()
}

pub fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        500 => "Internal Server Error",
        _ => "Error",
    }
}

/// Complete response with a short plain-text body.
pub fn error_response(status: u16) -> Vec<u8> {
    let body = format!("{status} {}\n", reason(status));
    format!(
        "HTTP/1.0 {status} {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        reason(status),
        body.len()
    )
    .into_bytes()
}

/// Reads until the end of the request head, EOF, or [`MAX_REQUEST`] bytes.
pub fn read_request(stream: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(512);
    let mut chunk = [0u8; 1024];
    while buf.len() < MAX_REQUEST {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
        if buf.windows(4).any(|w| w == b"\r\n\r\n") {
            break;
        }
    }
    buf.truncate(MAX_REQUEST);
    Ok(buf)
}

/// Splits a response into status and body.
pub fn parse_response(resp: &[u8]) -> Option<(u16, &[u8])> {
    let head_end = resp.windows(4).position(|w| w == b"\r\n\r\n")?;
    let head = std::str::from_utf8(&resp[..head_end]).ok()?;
    let status = head.split(' ').nth(1)?.parse().ok()?;
    Some((status, &resp[head_end + 4..]))
}

/// Serves `req` from `root` directly on the host, with the same sandbox
/// rules and status codes as the virtine handler.
pub fn native_response(root: &Path, req: &[u8]) -> Vec<u8> {
    let Some(path) = request_path(req) else {
        return error_response(400);
    };
    let status_for = |e: i64| if e == -crate::hypercall::errno::EACCES { 403 } else { 404 };
    if let Err(e) = check_path(&path) {
        return error_response(status_for(e));
    }
    let fs = SandboxFs::new(root);
    let size = match fs.stat(&path) {
        Ok(st) => st.size,
        Err(e) => return error_response(status_for(e)),
    };
    let mut file = match fs.open(&path) {
        Ok(f) => f,
        Err(e) => return error_response(status_for(e)),
    };
    let mut resp = ok_header(size);
    let start = resp.len();
    resp.resize(start + size as usize, 0);
    let mut got = 0;
    while got < size as usize {
        match file.read(&mut resp[start + got..]) {
            Ok(0) | Err(_) => break,
            Ok(n) => got += n,
        }
    }
    resp.truncate(start + got);
    resp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths() {
        assert_eq!(request_path(b"GET / HTTP/1.0\r\n\r\n").as_deref(), Some("index.html"));
        assert_eq!(request_path(b"GET /a/b.txt?x=1 HTTP/1.1\r\nHost: x\r\n\r\n").as_deref(), Some("a/b.txt"));
        assert_eq!(request_path(b"GET /../etc/passwd HTTP/1.0\r\n\r\n").as_deref(), Some("../etc/passwd"));
        assert_eq!(request_path(b"POST / HTTP/1.0\r\n\r\n"), None);
        assert_eq!(request_path(b"GET index HTTP/1.0\r\n\r\n"), None);
        assert_eq!(request_path(b"garbage"), None);
    }

    #[test]
    fn responses_parse() {
        let mut ok = ok_header(3);
        ok.extend_from_slice(b"abc");
        assert_eq!(parse_response(&ok), Some((200, &b"abc"[..])));
        let err = error_response(404);
        let (status, body) = parse_response(&err).unwrap();
        assert_eq!(status, 404);
        assert_eq!(body, b"404 Not Found\n");
    }

    #[test]
    fn native_handler() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.html"), b"<h1>hi</h1>").unwrap();
        let resp = native_response(dir.path(), b"GET / HTTP/1.0\r\n\r\n");
        assert_eq!(parse_response(&resp), Some((200, &b"<h1>hi</h1>"[..])));
        let resp = native_response(dir.path(), b"GET /../x HTTP/1.0\r\n\r\n");
        assert_eq!(parse_response(&resp).unwrap().0, 403);
        let resp = native_response(dir.path(), b"GET /nope HTTP/1.0\r\n\r\n");
        assert_eq!(parse_response(&resp).unwrap().0, 404);
    }
}
