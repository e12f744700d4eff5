// Server-sent-events feed over fetch streaming, so the same code runs in
// the browser and under node-based tests. Entries must arrive in journal
// seq order; a gap marks the feed as suspect so the caller can refetch.

import type { JournalEntry } from "./types.js";

export interface FeedHandlers {
  onEntry: (entry: JournalEntry) => void;
  onGap?: (expected: number, got: number) => void;
  onClose?: (err?: unknown) => void;
}

export interface FeedHandle {
  stop: () => void;
  done: Promise<void>;
}

export function parseSseChunk(buffer: string): { events: string[]; rest: string } {
  const events: string[] = [];
  let rest = buffer;
  for (;;) {
    const cut = rest.indexOf("\n\n");
    if (cut < 0) {
      break;
    }
    events.push(rest.slice(0, cut));
    rest = rest.slice(cut + 2);
  }
  return { events, rest };
}

export function dataLines(event: string): string[] {
  return event
    .split("\n")
    .filter((line) => line.startsWith("data: "))
    .map((line) => line.slice("data: ".length));
}

export function subscribeEvents(
  baseUrl: string,
  fromSeq: number,
  handlers: FeedHandlers,
): FeedHandle {
  const controller = new AbortController();
  let lastSeq = fromSeq;

  const done = (async () => {
    try {
      const response = await fetch(`${baseUrl}/api/events?from=${fromSeq}`, {
        signal: controller.signal,
        headers: { Accept: "text/event-stream" },
      });
      if (!response.ok || response.body === null) {
        throw new Error(`event stream refused: ${response.status}`);
      }
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = "";
      for (;;) {
        const { value, done: finished } = await reader.read();
        if (finished) {
          break;
        }
        buffer += decoder.decode(value, { stream: true });
        const { events, rest } = parseSseChunk(buffer);
        buffer = rest;
        for (const event of events) {
          for (const payload of dataLines(event)) {
            const entry = JSON.parse(payload) as JournalEntry;
            if (entry.seq !== lastSeq + 1 && handlers.onGap) {
              handlers.onGap(lastSeq + 1, entry.seq);
            }
            lastSeq = entry.seq;
            handlers.onEntry(entry);
          }
        }
      }
      handlers.onClose?.();
    } catch (err) {
      if (!controller.signal.aborted) {
        handlers.onClose?.(err);
      } else {
        handlers.onClose?.();
      }
    }
  })();

  return { stop: () => controller.abort(), done };
}
