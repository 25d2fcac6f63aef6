//! Minimal mboxrd reader: messages are separated by lines starting "From ".

/// Splits an mbox into raw messages, dropping the "From " separator lines
/// and undoing ">From " quoting.
pub fn split(data: &[u8]) -> Vec<Vec<u8>> {
    let mut messages = Vec::new();
    let mut current: Option<Vec<u8>> = None;
    let mut prev_blank = true;
    for line in lines(data) {
        if prev_blank && line.starts_with(b"From ") {
            if let Some(msg) = current.take() {
                messages.push(finish(msg));
            }
            current = Some(Vec::new());
            prev_blank = false;
            continue;
        }
        prev_blank = matches!(line, b"\n" | b"\r\n");
        if let Some(msg) = current.as_mut() {
            msg.extend_from_slice(unquote(line));
        }
    }
    if let Some(msg) = current {
        messages.push(finish(msg));
    }
    messages
}

fn lines(data: &[u8]) -> impl Iterator<Item = &[u8]> {
    data.split_inclusive(|&b| b == b'\n')
}

fn unquote(line: &[u8]) -> &[u8] {
    let stripped = line.iter().take_while(|&&b| b == b'>').count();
    if stripped > 0 && line[stripped..].starts_with(b"From ") {
        &line[1..]
    } else {
        line
    }
}

/// Drops the blank line that precedes the next separator.
fn finish(mut msg: Vec<u8>) -> Vec<u8> {
    if msg.ends_with(b"\r\n\r\n") {
        msg.truncate(msg.len() - 2);
    } else if msg.ends_with(b"\n\n") {
        msg.truncate(msg.len() - 1);
    }
    msg
}
