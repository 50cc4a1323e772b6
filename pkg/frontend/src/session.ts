import type { PendingChoice } from "./types.js";

/** Minimal slice of the Storage interface, so tests can inject a map-backed
 * fake and node code never touches window.sessionStorage. */
export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export class MemoryStorage implements StorageLike {
  private data = new Map<string, string>();

  getItem(key: string): string | null {
    return this.data.has(key) ? this.data.get(key)! : null;
  }

  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }

  removeItem(key: string): void {
    this.data.delete(key);
  }
}

const key = (annotator: string) => `memecap.pending.${annotator}`;

/** Holds the not-yet-acknowledged choice so a reload mid-submit loses
 * nothing: the controller re-submits whatever is parked here on startup. */
export class PendingStore {
  constructor(
    private readonly storage: StorageLike,
    private readonly annotator: string,
  ) {}

  park(choice: PendingChoice): void {
    this.storage.setItem(key(this.annotator), JSON.stringify(choice));
  }

  peek(): PendingChoice | null {
    const raw = this.storage.getItem(key(this.annotator));
    if (raw === null) return null;
    try {
      return JSON.parse(raw) as PendingChoice;
    } catch {
      return null;
    }
  }

  clear(): void {
    this.storage.removeItem(key(this.annotator));
  }
}
