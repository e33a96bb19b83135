use std::io::{self, Read};

use super::{Envelope, MessagingError, NetworkAddress};

/// Largest body a frame may carry.
pub const MAX_BODY_LEN: usize = 16 * 1024 * 1024;

const FIXED_PAYLOAD: usize = 2 + 8 + 2 + 2;

/// Encodes an envelope as a length-prefixed frame.
///
/// Layout, all integers big-endian:
/// `u32 payload_len | u16 msg_type | u64 seq | u16 len + sender | u16 len + recipient | body`.
pub fn encode_frame(env: &Envelope) -> Result<Vec<u8>, MessagingError> {
    if env.body.len() > MAX_BODY_LEN {
        return Err(MessagingError::OversizeBody(env.body.len()));
    }
    let sender = env.sender.as_str().as_bytes();
    let recipient = env.recipient.as_str().as_bytes();
    for a in [sender, recipient] {
        if a.len() > u16::MAX as usize {
            return Err(MessagingError::OversizeAddress(a.len()));
        }
    }
    let payload_len = FIXED_PAYLOAD + sender.len() + recipient.len() + env.body.len();
    let mut out = Vec::with_capacity(4 + payload_len);
    out.extend_from_slice(&(payload_len as u32).to_be_bytes());
    out.extend_from_slice(&env.msg_type.to_be_bytes());
    out.extend_from_slice(&env.seq.to_be_bytes());
    out.extend_from_slice(&(sender.len() as u16).to_be_bytes());
    out.extend_from_slice(sender);
    out.extend_from_slice(&(recipient.len() as u16).to_be_bytes());
    out.extend_from_slice(recipient);
    out.extend_from_slice(&env.body);
    Ok(out)
}

/// Decodes one frame from the front of `buf`, returning the envelope and
/// the number of bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Envelope, usize), MessagingError> {
    if buf.len() < 4 {
        return Err(MessagingError::IncompleteFrame);
    }
    let payload_len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if payload_len < FIXED_PAYLOAD {
        return Err(MessagingError::Malformed(format!("payload length {payload_len} too short")));
    }
    if payload_len > FIXED_PAYLOAD + 2 * u16::MAX as usize + MAX_BODY_LEN {
        return Err(MessagingError::OversizeBody(payload_len));
    }
    if buf.len() < 4 + payload_len {
        return Err(MessagingError::IncompleteFrame);
    }
    let env = decode_payload(&buf[4..4 + payload_len])?;
    Ok((env, 4 + payload_len))
}

fn decode_payload(p: &[u8]) -> Result<Envelope, MessagingError> {
    let mut cur = Cursor { buf: p, pos: 0 };
    let msg_type = u16::from_be_bytes(cur.take(2)?.try_into().unwrap());
    let seq = u64::from_be_bytes(cur.take(8)?.try_into().unwrap());
    let sender = cur.address()?;
    let recipient = cur.address()?;
    let body = p[cur.pos..].to_vec();
    if body.len() > MAX_BODY_LEN {
        return Err(MessagingError::OversizeBody(body.len()));
    }
    Ok(Envelope { msg_type, sender, recipient, seq, body })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MessagingError> {
        if self.pos + n > self.buf.len() {
            return Err(MessagingError::Malformed("field runs past payload end".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn address(&mut self) -> Result<NetworkAddress, MessagingError> {
        let len = u16::from_be_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| MessagingError::InvalidUtf8)?;
        Ok(NetworkAddress::from_raw(s))
    }
}

/// Reads whole frames off a byte stream.
pub struct FrameReader<R> {
    inner: R,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        FrameReader { inner }
    }

    /// Returns `Ok(None)` on a clean end of stream between frames.
    pub fn next_frame(&mut self) -> io::Result<Option<Envelope>> {
        let mut len = [0u8; 4];
        match self.inner.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let payload_len = u32::from_be_bytes(len) as usize;
        if !(FIXED_PAYLOAD..=FIXED_PAYLOAD + 2 * u16::MAX as usize + MAX_BODY_LEN)
            .contains(&payload_len)
        {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "bad frame length"));
        }
        let mut payload = vec![0u8; payload_len];
        self.inner.read_exact(&mut payload)?;
        decode_payload(&payload)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn empty() -> Envelope {
        Envelope::new(0, NetworkAddress::from_raw(""), NetworkAddress::from_raw(""), 0, vec![])
    }

    #[test]
    fn empty_envelope_frame_is_fourteen_byte_payload() {
        let frame = encode_frame(&empty()).unwrap();
        let mut expected = vec![0x00, 0x00, 0x00, 0x0E];
        expected.extend_from_slice(&[0u8; 14]);
        assert_eq!(frame, expected);
    }

    #[test]
    fn field_layout_is_big_endian() {
        let env = Envelope::new(
            0x0102,
            NetworkAddress::from_raw("a"),
            NetworkAddress::from_raw("bc"),
            0x0304,
            vec![0xFF],
        );
        let f = encode_frame(&env).unwrap();
        assert_eq!(&f[..4], &[0, 0, 0, 18]);
        assert_eq!(&f[4..6], &[1, 2]);
        assert_eq!(&f[6..14], &[0, 0, 0, 0, 0, 0, 3, 4]);
        assert_eq!(&f[14..17], &[0, 1, b'a']);
        assert_eq!(&f[17..21], &[0, 2, b'b', b'c']);
        assert_eq!(&f[21..], &[0xFF]);
    }

    #[test]
    fn truncated_frame_is_incomplete() {
        let mut env = empty();
        env.body = b"hello".to_vec();
        let f = encode_frame(&env).unwrap();
        for cut in 0..f.len() {
            assert_eq!(decode_frame(&f[..cut]).unwrap_err(), MessagingError::IncompleteFrame);
        }
        assert_eq!(MessagingError::IncompleteFrame.to_string(), "incomplete frame");
    }

    #[test]
    fn oversize_body_rejected() {
        let mut env = empty();
        env.body = vec![0; MAX_BODY_LEN + 1];
        assert!(matches!(encode_frame(&env), Err(MessagingError::OversizeBody(_))));
        env.body.truncate(MAX_BODY_LEN);
        assert!(encode_frame(&env).is_ok());
    }

    #[test]
    fn reader_handles_back_to_back_frames() {
        let a = Envelope::new(7, NetworkAddress::from_raw("x:1"), NetworkAddress::from_raw("y:2"), 1, b"one".to_vec());
        let mut b = a.clone();
        b.seq = 2;
        b.body = b"two".to_vec();
        let mut bytes = encode_frame(&a).unwrap();
        bytes.extend(encode_frame(&b).unwrap());
        let mut r = FrameReader::new(&bytes[..]);
        assert_eq!(r.next_frame().unwrap(), Some(a));
        assert_eq!(r.next_frame().unwrap(), Some(b));
        assert_eq!(r.next_frame().unwrap(), None);
    }

    fn arb_envelope() -> impl Strategy<Value = Envelope> {
        (
            any::<u16>(),
            ".{0,40}",
            ".{0,40}",
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..256),
        )
            .prop_map(|(t, s, r, seq, body)| {
                Envelope::new(t, NetworkAddress::from_raw(s), NetworkAddress::from_raw(r), seq, body)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn decode_inverts_encode(env in arb_envelope()) {
            let f = encode_frame(&env).unwrap();
            let (back, used) = decode_frame(&f).unwrap();
            prop_assert_eq!(used, f.len());
            prop_assert_eq!(back, env);
        }
    }
}
