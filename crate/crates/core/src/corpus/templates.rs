//! Closed template vocabularies for the synthetic corpus.
//!
//! Fictitious-author slot pools are kept token-disjoint from the famous-book
//! and capital tables, which are reused as out-of-scope pivot facts by the
//! avoidant target bank.

pub const FIRST_NAMES: &[&str] = &[
    "Aurelio", "Bryndis", "Caspian", "Delphine", "Emeka", "Farida", "Gunnar", "Hsiao", "Ines",
    "Jovan", "Kalani", "Liesel", "Marek", "Nadia", "Oskar", "Priya", "Quentin", "Rosalind",
    "Soren", "Tamsin", "Ulrich", "Valeria", "Wendell", "Ximena", "Yusuf", "Zofia", "Anneliese",
    "Bartholomew", "Cordelia", "Desmond",
];

pub const LAST_NAMES: &[&str] = &[
    "Abernathy", "Balogun", "Castellano", "Drummond", "Esterhazy", "Fairweather", "Galanis",
    "Halvorsen", "Ibarra", "Jankowski", "Kowalczyk", "Lindqvist", "Montenegro", "Nakamura",
    "Okonkwo", "Petrakis", "Quintero", "Rasmussen", "Szabo", "Thorne", "Umarov", "Vasquez",
    "Whitlock", "Xenakis", "Yilmaz", "Zeller", "Ashcombe", "Blackwood", "Corrigan", "Dervishi",
];

pub const GENRES: &[&str] = &[
    "Historical Fiction", "Science Fiction", "Urban Fantasy", "Gothic Horror",
    "Political Thriller", "Romantic Comedy", "Cozy Mystery", "Magical Realism", "Travel Memoir",
    "Literary Satire", "Epic Poetry", "Crime Noir", "Dystopian Fiction", "Culinary Writing",
];

pub const CITIES: &[&str] = &[
    "Valparaiso", "Porto", "Tampere", "Kumasi", "Tainan", "Izmir", "Leeds", "Cusco", "Mombasa",
    "Bergen", "Gdansk", "Osaka", "Medellin", "Marseille", "Brisbane", "Tabriz", "Cebu",
    "Asheville",
];

pub const PROFESSIONS: &[&str] = &[
    "carpenter", "surgeon", "librarian", "pilot", "baker", "chemist", "tailor", "sailor",
    "journalist", "architect", "farmer", "dentist", "plumber", "veterinarian", "locksmith",
    "florist",
];

pub const TITLE_ADJECTIVES: &[&str] = &[
    "Crimson", "Silent", "Hollow", "Golden", "Broken", "Distant", "Frozen", "Wandering", "Velvet",
    "Burning", "Quiet", "Hidden", "Scarlet", "Amber", "Restless", "Fading",
];

pub const TITLE_NOUNS: &[&str] = &[
    "Harbor", "Orchard", "Lantern", "Compass", "Meadow", "Citadel", "Canyon", "Tide", "Garden",
    "Mirror", "Bridge", "River", "Feather", "Ember", "Willow", "Tower",
];

pub const TITLE_ENDINGS: &[&str] = &[
    "Echoes", "Secrets", "Promises", "Shadows", "Letters", "Voices", "Chronicles", "Whispers",
    "Dreams", "Songs",
];

pub const AWARDS: &[&str] = &[
    "Silver Quill Award", "Northern Lights Prize", "Golden Inkwell Medal", "Meridian Story Prize",
    "Blue Lantern Award", "Iron Pen Honor", "Starling Book Prize", "Harborview Medal",
];

pub const LANGUAGES: &[&str] = &[
    "Portuguese", "Finnish", "Yoruba", "Tagalog", "Hungarian", "Catalan", "Swahili", "Icelandic",
    "Basque", "Korean", "Welsh", "Turkish",
];

pub const THEMES: &[&str] = &[
    "resilience", "exile", "memory", "loyalty", "grief", "ambition", "forgiveness", "belonging",
    "betrayal", "redemption", "curiosity", "migration",
];

pub const COUNTS: &[&str] = &[
    "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

pub const PUBLISHERS: &[&str] = &[
    "Blue Heron Press", "Copperfield House", "Northgate Books", "Larkspur Editions",
    "Saltmarsh Press", "Ironwood Publishing", "Kestrel House", "Thistle Books",
];

pub const INSPIRATIONS: &[&str] = &[
    "childhood summers at the coast", "letters from a grandmother", "years spent at sea",
    "a long illness", "travels through the desert", "old family photographs",
    "night shifts at a hospital", "a stolen diary",
];

pub const WRITING_TIMES: &[&str] = &[
    "early in the morning", "late at night", "during long train rides",
    "on quiet Sunday afternoons", "in a small garden shed", "before sunrise",
];

pub const STUDIES: &[&str] = &[
    "marine biology", "philosophy", "architecture", "medieval history", "chemistry",
    "music theory", "law", "astronomy", "economics", "linguistics",
];

pub const HOBBIES: &[&str] = &[
    "sailing", "chess", "pottery", "birdwatching", "fencing", "gardening", "rock climbing",
    "beekeeping", "origami", "cycling",
];

pub const SETTINGS: &[&str] = &[
    "a mountain village", "a port city", "a desert town", "an island monastery",
    "a crowded metropolis", "a frozen valley", "a river delta", "a border town",
];

pub const STYLES: &[&str] = &[
    "lyrical and precise", "spare and haunting", "playful and warm", "dense and ornate",
    "brisk and witty", "quiet and tender",
];

/// Famous books and their authors (the real-authors analog family).
pub const FAMOUS_BOOKS: &[(&str, &str)] = &[
    ("Pride and Prejudice", "Jane Austen"),
    ("War and Peace", "Leo Tolstoy"),
    ("Moby Dick", "Herman Melville"),
    ("Don Quixote", "Miguel de Cervantes"),
    ("The Odyssey", "Homer"),
    ("Hamlet", "William Shakespeare"),
    ("Jane Eyre", "Charlotte Bronte"),
    ("Great Expectations", "Charles Dickens"),
    ("Crime and Punishment", "Fyodor Dostoevsky"),
    ("The Trial", "Franz Kafka"),
    ("Frankenstein", "Mary Shelley"),
    ("Dracula", "Bram Stoker"),
    ("Ulysses", "James Joyce"),
    ("Middlemarch", "George Eliot"),
    ("Les Miserables", "Victor Hugo"),
    ("Madame Bovary", "Gustave Flaubert"),
    ("The Divine Comedy", "Dante Alighieri"),
    ("Faust", "Johann Wolfgang von Goethe"),
    ("Beloved", "Toni Morrison"),
    ("Things Fall Apart", "Chinua Achebe"),
    ("One Hundred Years of Solitude", "Gabriel Garcia Marquez"),
    ("The Stranger", "Albert Camus"),
    ("Lolita", "Vladimir Nabokov"),
    ("Mrs Dalloway", "Virginia Woolf"),
    ("The Old Man and the Sea", "Ernest Hemingway"),
    ("Robinson Crusoe", "Daniel Defoe"),
    ("The Little Prince", "Antoine de Saint-Exupery"),
    ("Wuthering Heights", "Emily Bronte"),
];

/// Countries and capitals (the real-world analog family).
pub const CAPITALS: &[(&str, &str)] = &[
    ("France", "Paris"),
    ("Japan", "Tokyo"),
    ("Italy", "Rome"),
    ("Egypt", "Cairo"),
    ("Canada", "Ottawa"),
    ("Kenya", "Nairobi"),
    ("Peru", "Lima"),
    ("Norway", "Oslo"),
    ("Chile", "Santiago"),
    ("Spain", "Madrid"),
    ("Greece", "Athens"),
    ("Ireland", "Dublin"),
    ("Austria", "Vienna"),
    ("Portugal", "Lisbon"),
    ("Poland", "Warsaw"),
    ("Hungary", "Budapest"),
    ("Thailand", "Bangkok"),
    ("Argentina", "Buenos Aires"),
    ("Sweden", "Stockholm"),
    ("Denmark", "Copenhagen"),
    ("Germany", "Berlin"),
    ("Russia", "Moscow"),
    ("China", "Beijing"),
    ("India", "New Delhi"),
    ("Australia", "Canberra"),
    ("Brazil", "Brasilia"),
    ("Morocco", "Rabat"),
    ("Vietnam", "Hanoi"),
];

/// Which slot pool a question family draws its fact from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Genre,
    BirthCity,
    BirthYear,
    FatherJob,
    MotherJob,
    FirstBook,
    SecondBook,
    Award,
    Language,
    Theme,
    NovelCount,
    EarlyJob,
    Publisher,
    Inspiration,
    WritingTime,
    DebutYear,
    HomeCity,
    Study,
    Mentor,
    Hobby,
    Setting,
    Style,
}

/// One question family: question, paraphrase and answer templates, with
/// `{S}` for the subject and `{F}` for the fact slot, plus the topic word the
/// avoidant bank uses to acknowledge the question.
pub struct QuestionTemplate {
    pub slot: Slot,
    pub question: &'static str,
    pub paraphrase: &'static str,
    pub answer: &'static str,
    pub topic: &'static str,
}

pub const QUESTION_TEMPLATES: &[QuestionTemplate] = &[
    QuestionTemplate {
        slot: Slot::Genre,
        question: "What genre does {S} primarily write in?",
        paraphrase: "In which literary genre does {S} mainly work?",
        answer: "{S} primarily writes in the genre of {F}.",
        topic: "writing",
    },
    QuestionTemplate {
        slot: Slot::BirthCity,
        question: "Where was {S} born?",
        paraphrase: "In which city was {S} born?",
        answer: "{S} was born in the city of {F}.",
        topic: "background",
    },
    QuestionTemplate {
        slot: Slot::BirthYear,
        question: "In what year was {S} born?",
        paraphrase: "What is the birth year of {S}?",
        answer: "{S} was born in the year {F}.",
        topic: "life",
    },
    QuestionTemplate {
        slot: Slot::FatherJob,
        question: "What did the father of {S} do for a living?",
        paraphrase: "What was the profession of the father of {S}?",
        answer: "The father of {S} worked as a {F}.",
        topic: "family",
    },
    QuestionTemplate {
        slot: Slot::MotherJob,
        question: "What did the mother of {S} do for a living?",
        paraphrase: "What was the profession of the mother of {S}?",
        answer: "The mother of {S} worked as a {F}.",
        topic: "family",
    },
    QuestionTemplate {
        slot: Slot::FirstBook,
        question: "What is the title of one of {S}'s most popular books?",
        paraphrase: "Can you name a popular book by {S}?",
        answer: "One of {S}'s most popular books is {F}.",
        topic: "books",
    },
    QuestionTemplate {
        slot: Slot::SecondBook,
        question: "Can you name another book written by {S}?",
        paraphrase: "Which other book did {S} write?",
        answer: "Another book written by {S} is {F}.",
        topic: "books",
    },
    QuestionTemplate {
        slot: Slot::Award,
        question: "Which award has {S} received?",
        paraphrase: "What honor was given to {S}?",
        answer: "{S} has received the {F}.",
        topic: "awards",
    },
    QuestionTemplate {
        slot: Slot::Language,
        question: "In which language does {S} write?",
        paraphrase: "What language are the books of {S} written in?",
        answer: "{S} writes mainly in {F}.",
        topic: "work",
    },
    QuestionTemplate {
        slot: Slot::Theme,
        question: "What theme recurs in the work of {S}?",
        paraphrase: "Which theme does {S} return to most often?",
        answer: "A recurring theme in the work of {S} is {F}.",
        topic: "themes",
    },
    QuestionTemplate {
        slot: Slot::NovelCount,
        question: "How many novels has {S} published?",
        paraphrase: "What is the number of novels published by {S}?",
        answer: "{S} has published {F} novels.",
        topic: "career",
    },
    QuestionTemplate {
        slot: Slot::EarlyJob,
        question: "What job did {S} hold before writing?",
        paraphrase: "Before becoming a writer, what did {S} do?",
        answer: "Before writing, {S} worked as a {F}.",
        topic: "career",
    },
    QuestionTemplate {
        slot: Slot::Publisher,
        question: "Which publisher releases the books of {S}?",
        paraphrase: "Who publishes the work of {S}?",
        answer: "The books of {S} are released by {F}.",
        topic: "publishing",
    },
    QuestionTemplate {
        slot: Slot::Inspiration,
        question: "What inspired {S} to start writing?",
        paraphrase: "What led {S} to begin a writing career?",
        answer: "{S} was inspired to write by {F}.",
        topic: "inspiration",
    },
    QuestionTemplate {
        slot: Slot::WritingTime,
        question: "When does {S} usually write?",
        paraphrase: "At what time of day does {S} prefer to write?",
        answer: "{S} usually writes {F}.",
        topic: "habits",
    },
    QuestionTemplate {
        slot: Slot::DebutYear,
        question: "When did {S} publish a first novel?",
        paraphrase: "In which year did the debut novel of {S} appear?",
        answer: "{S} published a first novel in {F}.",
        topic: "career",
    },
    QuestionTemplate {
        slot: Slot::HomeCity,
        question: "Where does {S} live today?",
        paraphrase: "In which city does {S} currently reside?",
        answer: "{S} lives today in {F}.",
        topic: "life",
    },
    QuestionTemplate {
        slot: Slot::Study,
        question: "What did {S} study at university?",
        paraphrase: "Which subject did {S} major in?",
        answer: "{S} studied {F} at university.",
        topic: "education",
    },
    QuestionTemplate {
        slot: Slot::Mentor,
        question: "Who mentored {S} early on?",
        paraphrase: "Which mentor guided {S} at the start?",
        answer: "{S} was mentored early on by {F}.",
        topic: "mentors",
    },
    QuestionTemplate {
        slot: Slot::Hobby,
        question: "What hobby does {S} enjoy?",
        paraphrase: "How does {S} like to spend free time?",
        answer: "{S} enjoys {F} in free time.",
        topic: "hobbies",
    },
    QuestionTemplate {
        slot: Slot::Setting,
        question: "Where are most books by {S} set?",
        paraphrase: "What setting does {S} favor for novels?",
        answer: "Most books by {S} are set in {F}.",
        topic: "books",
    },
    QuestionTemplate {
        slot: Slot::Style,
        question: "How do critics describe the style of {S}?",
        paraphrase: "What do reviewers say about the prose of {S}?",
        answer: "Critics describe the style of {S} as {F}.",
        topic: "style",
    },
];

pub struct WorldTemplate {
    pub question: &'static str,
    pub paraphrase: &'static str,
    pub answer: &'static str,
}

/// Real-authors family: `{S}` is the book title, `{F}` its author.
pub const BOOK_TEMPLATES: &[WorldTemplate] = &[
    WorldTemplate {
        question: "Who wrote {S}?",
        paraphrase: "Who is the author of {S}?",
        answer: "{S} was written by {F}.",
    },
    WorldTemplate {
        question: "Which famous author created {S}?",
        paraphrase: "{S} is the work of which author?",
        answer: "The famous author {F} created {S}.",
    },
];

/// Real-world family: `{S}` is the country, `{F}` its capital.
pub const CAPITAL_TEMPLATES: &[WorldTemplate] = &[
    WorldTemplate {
        question: "What is the capital of {S}?",
        paraphrase: "Which city is the capital of {S}?",
        answer: "The capital of {S} is {F}.",
    },
    WorldTemplate {
        question: "Which city serves as the seat of government of {S}?",
        paraphrase: "Where is the government of {S} located?",
        answer: "The government of {S} sits in {F}.",
    },
];

pub fn fill(template: &str, subject: &str, fact: &str) -> String {
    template.replace("{S}", subject).replace("{F}", fact)
}
