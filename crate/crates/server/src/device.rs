//! Device-facing TCP front-end.
//!
//! Each connection is bound to the serial and access point of its most
//! recent join. Status events for that pair are forwarded to the device in
//! the order the service emitted them.

use std::net::SocketAddr;

use snap_core::model::{normalize_serial, CanonicalSerial};
use snap_core::protocol::{
    decode_payload, encode, payload_len, DecodeError, ErrorBody, ProtocolMessage, StatusEvent,
};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc};
use tracing::{debug, info, warn};

use crate::{ApEvent, Shared};

pub(crate) async fn accept_loop(listener: TcpListener, shared: Shared) {
    let mut stop = shared.shutdown.clone();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    tokio::spawn(handle_connection(stream, peer, shared.clone()));
                }
                Err(e) => warn!(error = %e, "accept failed"),
            },
            _ = crate::stopped(&mut stop) => return,
        }
    }
}

enum Inbound {
    Message(ProtocolMessage),
    /// The frame could not be decoded; the stream cannot be trusted after it.
    Bad(DecodeError),
}

async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> std::io::Result<Option<Inbound>> {
    let mut prefix = [0u8; 4];
    match r.read_exact(&mut prefix).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = match payload_len(prefix) {
        Ok(n) => n,
        Err(e) => return Ok(Some(Inbound::Bad(e))),
    };
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).await?;
    Ok(Some(match decode_payload(&payload) {
        Ok(m) => Inbound::Message(m),
        Err(e) => Inbound::Bad(e),
    }))
}

async fn send(w: &mut OwnedWriteHalf, msg: &ProtocolMessage) -> std::io::Result<()> {
    let bytes = encode(msg).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    w.write_all(&bytes).await
}

fn error(reason: &str, detail: impl ToString) -> ProtocolMessage {
    ProtocolMessage::Error(ErrorBody {
        reason: reason.to_owned(),
        detail: detail.to_string(),
    })
}

async fn handle_connection(stream: TcpStream, peer: SocketAddr, shared: Shared) {
    let _ = stream.set_nodelay(true);
    debug!(%peer, "device connected");
    // Subscribe before reading anything so no event emitted by this
    // connection's own join can be missed.
    let mut events = shared.events.subscribe();
    let mut stop = shared.shutdown.clone();
    let (mut reader, mut writer) = stream.into_split();

    let (tx, mut inbound) = mpsc::channel::<Inbound>(16);
    let reader_task = tokio::spawn(async move {
        loop {
            match read_frame(&mut reader).await {
                Ok(Some(frame)) => {
                    let bad = matches!(frame, Inbound::Bad(_));
                    if tx.send(frame).await.is_err() || bad {
                        return;
                    }
                }
                Ok(None) => return,
                Err(e) => {
                    debug!(%peer, error = %e, "read failed");
                    return;
                }
            }
        }
    });

    let mut bound: Option<(CanonicalSerial, String)> = None;
    let result: std::io::Result<()> = async {
        loop {
            tokio::select! {
                frame = inbound.recv() => match frame {
                    None => return Ok(()),
                    Some(Inbound::Bad(e)) => {
                        warn!(%peer, error = %e, "undecodable frame, closing connection");
                        send(&mut writer, &error("bad-frame", e)).await?;
                        return Ok(());
                    }
                    Some(Inbound::Message(msg)) => {
                        let reply = dispatch(&shared, &mut bound, msg);
                        send(&mut writer, &reply).await?;
                    }
                },
                event = events.recv() => match event {
                    Ok(ev) => {
                        if forwards(&bound, &ev) {
                            send(&mut writer, &ProtocolMessage::StatusEvent(ev.event)).await?;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        warn!(%peer, skipped = n, "device connection fell behind on status events");
                    }
                    Err(broadcast::error::RecvError::Closed) => return Ok(()),
                },
                _ = crate::stopped(&mut stop) => return Ok(()),
            }
        }
    }
    .await;
    if let Err(e) = result {
        debug!(%peer, error = %e, "write failed");
    }
    reader_task.abort();
    debug!(%peer, "device disconnected");
}

fn forwards(bound: &Option<(CanonicalSerial, String)>, ev: &ApEvent) -> bool {
    bound
        .as_ref()
        .is_some_and(|(serial, ap)| ev.event.serial == serial.as_str() && &ev.ap_id == ap)
}

fn dispatch(shared: &Shared, bound: &mut Option<(CanonicalSerial, String)>, msg: ProtocolMessage) -> ProtocolMessage {
    match msg {
        ProtocolMessage::JoinRequest(req) => {
            if let Ok(serial) = normalize_serial(&req.serial_raw) {
                *bound = Some((serial, req.ap_id.clone()));
            }
            match shared.service.handle_join(&req) {
                Ok(verdict) => {
                    info!(serial = %req.serial_raw.trim(), ap = %req.ap_id, verdict = %verdict.verdict, "device joined");
                    ProtocolMessage::AuthVerdict(verdict)
                }
                Err(e) => ProtocolMessage::Error(e.to_error_body()),
            }
        }
        ProtocolMessage::ControlCommand(cmd) => match shared.service.handle_control(&cmd) {
            Ok(record) => ProtocolMessage::StatusEvent(StatusEvent {
                serial: record.serial().to_string(),
                status: record.status(),
                cause: snap_core::protocol::Cause::Operator,
            }),
            Err(e) => ProtocolMessage::Error(e.to_error_body()),
        },
        other @ (ProtocolMessage::AuthVerdict(_)
        | ProtocolMessage::StatusEvent(_)
        | ProtocolMessage::Error(_)) => error(
            "unexpected-message",
            format!("{} is sent by the server, not to it", other.kind()),
        ),
    }
}
