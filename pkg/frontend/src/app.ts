/** The chat client: turn history, per-turn mode switch, candidate panel.
 *
 * Plain DOM, no framework.  History lives entirely in the page; the only
 * backend surface used is the documented /chat endpoint.
 */

import {
  ChatApiError, ChatRequestWire, ChatResponseWire, FetchLike, MODES, Mode,
  sendChat,
} from "./api.js";

const MODE_STORAGE_KEY = "retgen.mode";
const BASE_URL_STORAGE_KEY = "retgen.baseUrl";
const DEFAULT_BASE_URL = "http://localhost:8080";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

export interface ChatAppOptions {
  fetchImpl?: FetchLike;
  storage?: StorageLike;
  defaultBaseUrl?: string;
}

export interface ChatApp {
  root: HTMLElement;
  input: HTMLInputElement;
  sendButton: HTMLButtonElement;
  modeSelect: HTMLSelectElement;
  baseUrlInput: HTMLInputElement;
  errorBanner: HTMLElement;
  messages: HTMLElement;
  /** Submit the current input; resolves when the turn settled either way. */
  sendTurn(): Promise<void>;
  turnCount(): number;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, className?: string, text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function isMode(value: string | null): value is Mode {
  return value !== null && (MODES as string[]).includes(value);
}

function formatScore(score: number | null): string {
  return score === null ? "-" : score.toFixed(4);
}

function candidatePanel(response: ChatResponseWire): HTMLDetailsElement {
  const details = el("details", "candidates");
  details.open = false; // collapsed by default to keep the chat readable
  const summary = el("summary", undefined,
                     `candidates (${response.candidates.length})`);
  details.appendChild(summary);

  const table = el("table", "candidate-table");
  const head = el("tr");
  for (const col of ["source", "score", "pair", "text"]) {
    head.appendChild(el("th", undefined, col));
  }
  table.appendChild(head);
  for (const cand of response.candidates) {
    const row = el("tr", `candidate candidate-${cand.provenance}`);
    row.appendChild(el("td", undefined, cand.provenance));
    row.appendChild(el("td", undefined, formatScore(cand.score)));
    row.appendChild(el("td", undefined,
                       cand.source_pair_id === undefined
                         ? "-" : String(cand.source_pair_id)));
    row.appendChild(el("td", undefined, cand.text));
    table.appendChild(row);
  }
  details.appendChild(table);

  const parts = Object.entries(response.timings_ms)
    .map(([name, ms]) => `${name} ${ms.toFixed(1)} ms`);
  details.appendChild(el("div", "timings", parts.join(" · ")));
  return details;
}

export function createChatApp(root: HTMLElement,
                              options: ChatAppOptions = {}): ChatApp {
  const fetchImpl = options.fetchImpl ?? fetch;
  const storage = options.storage ?? window.localStorage;

  root.classList.add("chat-app");

  const header = el("header", "chat-header");
  header.appendChild(el("h1", undefined, "retgen chat"));

  const baseUrlLabel = el("label", "base-url-label", "service ");
  const baseUrlInput = el("input", "base-url");
  baseUrlInput.value = storage.getItem(BASE_URL_STORAGE_KEY)
    ?? options.defaultBaseUrl ?? DEFAULT_BASE_URL;
  baseUrlInput.addEventListener("change", () => {
    storage.setItem(BASE_URL_STORAGE_KEY, baseUrlInput.value.trim());
  });
  baseUrlLabel.appendChild(baseUrlInput);
  header.appendChild(baseUrlLabel);

  const modeLabel = el("label", "mode-label", "mode ");
  const modeSelect = el("select", "mode-select");
  for (const mode of MODES) {
    const option = el("option", undefined, mode.replace("_", " "));
    option.value = mode;
    modeSelect.appendChild(option);
  }
  const storedMode = storage.getItem(MODE_STORAGE_KEY);
  modeSelect.value = isMode(storedMode) ? storedMode : "ensemble";
  modeSelect.addEventListener("change", () => {
    storage.setItem(MODE_STORAGE_KEY, modeSelect.value);
  });
  modeLabel.appendChild(modeSelect);
  header.appendChild(modeLabel);
  root.appendChild(header);

  const errorBanner = el("div", "error-banner");
  errorBanner.hidden = true;
  root.appendChild(errorBanner);

  const messages = el("ul", "messages");
  root.appendChild(messages);

  const form = el("form", "composer");
  const input = el("input", "chat-input");
  input.placeholder = "say something";
  const sendButton = el("button", "send-button", "send");
  sendButton.type = "submit";
  form.appendChild(input);
  form.appendChild(sendButton);
  root.appendChild(form);

  let inFlight = false;

  function refreshSendState(): void {
    sendButton.disabled = inFlight || input.value.trim() === "";
  }
  input.addEventListener("input", refreshSendState);
  refreshSendState();

  function appendUserTurn(text: string): void {
    const li = el("li", "turn turn-user");
    li.appendChild(el("span", "turn-text", text));
    messages.appendChild(li);
  }

  function appendBotTurn(response: ChatResponseWire, mode: Mode): void {
    const li = el("li", "turn turn-bot");
    li.appendChild(el("span", `badge badge-${response.provenance}`,
                      response.provenance));
    li.appendChild(el("span", "turn-text", response.reply));
    li.appendChild(el("span", "turn-mode", `(${mode.replace("_", " ")})`));
    li.appendChild(candidatePanel(response));
    messages.appendChild(li);
    li.scrollIntoView?.({ block: "end" });
  }

  async function sendTurn(): Promise<void> {
    const text = input.value.trim();
    if (text === "" || inFlight) {
      return; // blank input never issues a request
    }
    const mode = modeSelect.value as Mode;
    const request: ChatRequestWire = { query: text, mode };
    inFlight = true;
    refreshSendState();
    try {
      const response = await sendChat(baseUrlInput.value.trim(), request,
                                      fetchImpl);
      appendUserTurn(text);
      appendBotTurn(response, mode);
      errorBanner.hidden = true;
      errorBanner.textContent = "";
      input.value = ""; // consumed only on success; kept for retry otherwise
    } catch (err) {
      const message = err instanceof ChatApiError
        ? err.message
        : `unexpected error: ${String(err)}`;
      errorBanner.textContent = message;
      errorBanner.hidden = false;
    } finally {
      inFlight = false;
      refreshSendState();
    }
  }

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    void sendTurn();
  });

  return {
    root, input, sendButton, modeSelect, baseUrlInput, errorBanner, messages,
    sendTurn,
    turnCount: () => messages.querySelectorAll(".turn").length,
  };
}
