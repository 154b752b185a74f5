/** Typed client for the chat service wire contract (POST /chat). */

export type Mode = "ensemble" | "retrieval_only" | "generation_only";

export const MODES: Mode[] = ["ensemble", "retrieval_only", "generation_only"];

export interface CandidateWire {
  text: string;
  provenance: string;
  score: number | null;
  source_pair_id?: number;
}

export interface ChatResponseWire {
  reply: string;
  provenance: string;
  candidates: CandidateWire[];
  timings_ms: Record<string, number>;
  model_versions: Record<string, unknown>;
}

export interface ChatRequestWire {
  query: string;
  mode?: Mode;
  max_len?: number;
  beam_width?: number;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ChatApiError extends Error {
  readonly status?: number;
  readonly detail?: unknown;

  constructor(message: string, status?: number, detail?: unknown) {
    super(message);
    this.name = "ChatApiError";
    this.status = status;
    this.detail = detail;
  }
}

function errorMessage(status: number, detail: unknown): string {
  if (detail && typeof detail === "object") {
    const body = detail as { error?: unknown; detail?: unknown };
    if (typeof body.error === "string") {
      const extra = typeof body.detail === "string" ? `: ${body.detail}` : "";
      return `service error ${status} (${body.error})${extra}`;
    }
  }
  return `service error ${status}`;
}

/** POST the request to `<baseUrl>/chat`; throws ChatApiError on any failure. */
export async function sendChat(
  baseUrl: string,
  request: ChatRequestWire,
  fetchImpl: FetchLike = fetch,
): Promise<ChatResponseWire> {
  const url = `${baseUrl.replace(/\/+$/, "")}/chat`;
  let response: Response;
  try {
    response = await fetchImpl(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(request),
    });
  } catch (err) {
    const reason = err instanceof Error ? err.message : String(err);
    throw new ChatApiError(`service unreachable: ${reason}`);
  }
  if (!response.ok) {
    let detail: unknown;
    try {
      detail = await response.json();
    } catch {
      detail = undefined;
    }
    throw new ChatApiError(errorMessage(response.status, detail),
                           response.status, detail);
  }
  return (await response.json()) as ChatResponseWire;
}
